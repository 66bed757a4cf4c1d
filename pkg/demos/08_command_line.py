"""
The command-line pipeline
=========================

The same steps through the ``lail`` command, using the tiny test config so
everything finishes in seconds.  In a shell this is ``lail gen-data ...``.
"""

import tempfile
from pathlib import Path

from lail.cli import main

tiny = str(Path(__file__).resolve().parent.parent / "tests" / "data" / "tiny.cfg")
out = Path(tempfile.mkdtemp())

main(["gen-data", "--config", tiny, "--out-dir", str(out)])
main(["train-lm", "--config", tiny, "--data", str(out / "dataset.bin"), "--out-dir", str(out)])
for seed in ("0", "1"):
    run = out / "runs" / f"baseline-{seed}"
    main(["train-asr", "--config", tiny, "--seed", seed, "--data", str(out / "dataset.bin"), "--out-dir", str(run)])
    main(["eval", "--data", str(out / "dataset.bin"), "--run", str(run)])
main(["decode", "--data", str(out / "dataset.bin"), "--run", str(out / "runs" / "baseline-0"), "--split", "test_clean"])
main(["report", "--runs", str(out / "runs")])
