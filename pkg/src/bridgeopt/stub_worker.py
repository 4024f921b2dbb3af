"""Reference worker for the stdio line protocol.

Reads one JSON request per line, answers one JSON response per line. Metrics,
generated examples, and embeddings are all deterministic digests of the
request, so round-trips are reproducible. Misbehavior flags exist to exercise
the client's error paths in tests.

Run it with: python -m bridgeopt.stub_worker [flags]
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time


def _digest01(*parts: str) -> float:
    """Deterministic float in [0, 1] from the given strings."""
    h = hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()
    return int(h[:8], 16) / 0xFFFFFFFF


def _handle_evaluate(request: dict) -> dict:
    ids = sorted(request.get("subset_ids", []))
    return {"metric": _digest01("evaluate", *ids)}


def _handle_generate(request: dict, args) -> dict:
    seeds = request.get("seed_examples", [])
    rnd = request.get("round", 0)
    examples = []
    if seeds:
        for record in seeds:
            examples.append(
                {
                    "id": record["id"],
                    "input": record["input"],
                    "rationale": f"regenerated at round {rnd}: {record['rationale']}",
                    "output": record["output"],
                    "correct": True,
                    "meta": {},
                }
            )
    else:
        for j in range(args.pool_size):
            examples.append(
                {
                    "id": f"s{j}",
                    "input": f"stub task {j}",
                    "rationale": f"stub rationale {j}",
                    "output": f"stub answer {j}",
                    "correct": True,
                    "meta": {},
                }
            )
    if args.duplicate_ids and examples:
        examples.append(dict(examples[0]))
    return {"examples": examples}


def _handle_embed(request: dict, args) -> dict:
    vectors = []
    for text in request.get("texts", []):
        vec = []
        for k in range(args.dim):
            vec.append(2.0 * _digest01("embed", text, str(k)) - 1.0)
        vectors.append(vec)
    return {"vectors": vectors}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--pool-size", type=int, default=6)
    parser.add_argument("--dim", type=int, default=8)
    parser.add_argument("--duplicate-ids", action="store_true",
                        help="emit one duplicated id per generate response")
    parser.add_argument("--malformed-after", type=int, default=-1,
                        help="emit a non-JSON line instead of the Nth response")
    parser.add_argument("--hang-after", type=int, default=-1,
                        help="stop responding after N responses")
    parser.add_argument("--exit-after", type=int, default=-1,
                        help="exit with code 3 after N responses")
    args = parser.parse_args(argv)

    handled = 0
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        request = json.loads(line)
        if args.exit_after >= 0 and handled >= args.exit_after:
            print("stub worker: giving up", file=sys.stderr, flush=True)
            return 3
        if args.hang_after >= 0 and handled >= args.hang_after:
            time.sleep(3600)
        if args.malformed_after >= 0 and handled >= args.malformed_after:
            sys.stdout.write("this is not json\n")
            sys.stdout.flush()
            handled += 1
            continue
        op = request.get("op")
        if op == "evaluate":
            body = _handle_evaluate(request)
        elif op == "generate":
            body = _handle_generate(request, args)
        elif op == "embed":
            body = _handle_embed(request, args)
        else:
            response = {"id": request.get("id"), "ok": False, "error": f"unknown op {op!r}"}
            sys.stdout.write(json.dumps(response) + "\n")
            sys.stdout.flush()
            handled += 1
            continue
        response = {"id": request.get("id"), "ok": True, **body}
        sys.stdout.write(json.dumps(response) + "\n")
        sys.stdout.flush()
        handled += 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
