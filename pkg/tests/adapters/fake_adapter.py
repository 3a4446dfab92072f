"""Misbehaving score adapters for error-path tests; mode is argv[1]."""
import json
import sys
import time

mode = sys.argv[1]
pending = []
for line in sys.stdin:
    req = json.loads(line)
    n = len(req["x"])
    if mode == "malformed":
        print("this is not json", flush=True)
    elif mode == "wrong-dim":
        print(json.dumps({"id": req["id"], "score": [0.0] * (n + 1)}), flush=True)
    elif mode == "wrong-id":
        print(json.dumps({"id": req["id"] + 10_000, "score": [0.0] * n}), flush=True)
    elif mode == "silent":
        time.sleep(60)
    elif mode == "exit":
        sys.exit(0)
    elif mode == "reverse":
        # answer in pairs, second request first; score encodes the id
        pending.append(req)
        if len(pending) == 2:
            for r in reversed(pending):
                print(json.dumps({"id": r["id"], "score": [float(r["id"])] * n}), flush=True)
            pending = []
