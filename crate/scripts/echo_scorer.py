#!/usr/bin/env python3
"""Reference scorer for the external reranker exchange.

Reads one JSON object per line on stdin:
    {"qid", "docno", "query", "text", "first_stage_score", "first_stage_rank"}
and writes one line per candidate on stdout:
    {"qid", "docno", "score"}
A null score marks a candidate the scorer could not handle.

This one echoes the first-stage score, so reranking keeps the original order.
Swap the body of `score` for a real model.
"""

import json
import sys


def score(request):
    return request["first_stage_score"]


def main():
    for line in sys.stdin:
        if not line.strip():
            continue
        request = json.loads(line)
        try:
            value = score(request)
        except Exception:
            value = None
        out = {"qid": request["qid"], "docno": request["docno"], "score": value}
        sys.stdout.write(json.dumps(out) + "\n")
    sys.stdout.flush()


if __name__ == "__main__":
    main()
