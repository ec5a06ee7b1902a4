"""Smoke test for the `zemi` Python extension.

Builds the extension with cargo (release, extension-module feature), loads
it from a temp directory and runs a tiny synth -> eval pipeline.

    python3 python/smoke_test.py
"""

import json
import math
import pathlib
import shutil
import subprocess
import sys
import sysconfig
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build_extension(dest):
    subprocess.run(
        ["cargo", "build", "--release", "-p", "zemi-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libzemi.so"
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy(lib, dest / ("zemi" + suffix))


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        build_extension(tmp)
        sys.path.insert(0, str(tmp))
        import zemi

        assert zemi.tokenize("The Cat, sat.") == ["the", "cat", "sat"]

        idx = zemi.Bm25Index([("a", "cat sat"), ("b", "dog ran")])
        hits = idx.retrieve("cat", k=5)
        assert hits[0][0] == "a" and abs(hits[0][1] - math.log(2)) < 1e-12, hits
        assert len(idx) == 2

        try:
            zemi.Experiment(overrides=["model.n_heads=3"])
        except ValueError as e:
            assert "n_heads" in str(e)
        else:
            raise AssertionError("invalid config accepted")

        work = tmp / "run"
        paths = {
            "corpus": "data/corpus.jsonl",
            "tasks": "data/tasks",
            "index": "data/index.bm25",
            "cache": "data/retrieval.jsonl",
            "checkpoints": "checkpoints",
            "reports": "reports",
        }
        overrides = [f"paths.{k}={work / v}" for k, v in paths.items()]
        exp = zemi.Experiment(str(ROOT / "configs" / "quickstart.toml"), overrides)
        n_docs, n_train, n_eval = exp.synth()
        exp.index()
        exp.retrieve()
        out = exp.train()
        report = exp.eval()
        assert 0.0 <= report["macro_average"] <= 1.0
        assert len(report["tasks"]) == n_eval

        fresh = exp.eval(str(work / "checkpoints" / "initial.ckpt"))
        assert fresh["gates"]["attn_tanh"] == 0.0

        print(json.dumps({
            "documents": n_docs,
            "train_tasks": n_train,
            "instances": out["instances"],
            "macro_average": report["macro_average"],
        }))
        print("smoke test ok")


if __name__ == "__main__":
    main()
