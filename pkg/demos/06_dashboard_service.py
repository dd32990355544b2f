"""
The eight-block dashboard over HTTP
===================================

Start the ingest service in-process, post the bundled emissions, then
read back the summary, a page of records and the rate series, the same
way a dashboard client would.
"""

import json
import tempfile
import urllib.request

from hhmon import data
from hhmon.ingest import IngestService
from hhmon.ingest.http import IngestHttpServer
from hhmon.report import collect, render_table


def get(url):
    with urllib.request.urlopen(url) as r:
        return json.load(r)


svc = IngestService(tempfile.mkdtemp(prefix="hh-dash-"))
with IngestHttpServer(svc) as srv:
    for line in data.read_text("fig7.jsonl").splitlines():
        req = urllib.request.Request(srv.url + "/api/v1/ingest", data=line.encode(), method="POST")
        urllib.request.urlopen(req).read()

    dev = get(srv.url + "/api/v1/devices")["devices"][0]
    base = f"{srv.url}/api/v1/devices/{dev}"
    print(json.dumps(get(base + "/summary"), indent=2))

    page = get(base + "/events?limit=3")
    print("newest records:", [(r["seq"], r["event"], r["rate_percent"]) for r in page["records"]])

    series = get(base + "/rate-series?bucket_ms=900000")["series"]
    print("rate every 15 min:", [s["rate_percent"] for s in series])

    print(render_table(collect(srv.url, dev)))
