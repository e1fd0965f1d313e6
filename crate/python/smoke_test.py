"""Smoke test for the spanlight Python module.

Uses an installed `spanlight` if present, otherwise the shared library from
`cargo build -p spanlight-py --features extension-module`.
"""

import importlib
import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        return importlib.import_module("spanlight")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libspanlight.so"
        if lib.exists():
            tmp = Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "spanlight.so")
            sys.path.insert(0, str(tmp))
            return importlib.import_module("spanlight")
    sys.exit("spanlight module not found; build it with cargo build -p spanlight-py --features extension-module")


def main():
    sl = load()

    assert sl.tokenize("the cat sat.") == [("the", 0, 3), ("cat", 4, 7), ("sat", 8, 11), (".", 11, 12)]
    assert sl.flops_estimate(1, 128, 768) == 394112
    assert abs(sl.maxsim_score([[1.0, 0.0], [0.0, 1.0]], [[0.6, 0.8]]) - 1.4) < 1e-6
    spans = sl.select_spans([0.9, 0.8, 0.1, 0.7], "a b c d", 0.5)
    assert [s[:4] for s in spans] == [(0, 1, 0, 3), (3, 3, 6, 7)]
    assert abs(spans[0][4] - 0.9) < 1e-6
    assert sl.token_f1([True, True, False], [False, True, True])[2] == 0.5

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        sl.make_synthetic(str(d / "data"), seed=7, queries=10, corpus_size=60, dim=32)
        index = sl.Index.build(str(d / "data" / "corpus.jsonl"), str(d / "idx"), dim=32)
        assert len(index) == 60 and index.dim == 32 and not index.has_head

        first = json.loads((d / "data" / "queries.jsonl").read_text().splitlines()[0])
        hits = index.search(first["text"], k=5)
        assert len(hits) == 5
        assert all(a.score >= b.score for a, b in zip(hits, hits[1:]))
        for tok in hits[0].tokens:
            assert hits[0].text[tok[1]:tok[2]] == tok[0]

        initial, final = sl.train(str(d / "data" / "train.jsonl"), str(d / "params.bin"), dim=32, epochs=10, hidden_dim=16)
        assert final < initial
        trained = sl.Index.build(str(d / "data" / "corpus.jsonl"), str(d / "tidx"), dim=32, params=str(d / "params.bin"))
        assert trained.has_head
        assert len(trained.search(first["text"], k=3)) == 3

        try:
            sl.Index.open(str(d / "idx"), params=str(d / "params.bin"))
        except ValueError:
            pass
        else:
            raise AssertionError("projected params accepted by an unprojected index")

    print("smoke test ok")


if __name__ == "__main__":
    main()
