"""
Command-line round trip
=======================

Generate a matrix file, invert it on four ranks with verification, and
benchmark the phases, all through the ``btaselinv`` command.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

cli = [sys.executable, "-m", "btaselinv.cli"]
work = Path(tempfile.mkdtemp())


def run(*args):
    out = subprocess.run(cli + [str(a) for a in args], check=True, capture_output=True, text=True).stdout
    print("$ btaselinv", " ".join(str(a) for a in args))
    print(out)
    return out


run("generate", "--seed", 1, "--n", 32, "--b", 16, "--a", 4, "--out", work / "A.bta")

report = json.loads(run("selinv", "--in", work / "A.bta", "--ranks", 4, "--verify", "--out", work / "X.bta"))
assert report["verify"]["status"] == "pass"

run("bench", "--in", work / "A.bta", "--ranks", 4, "--repeats", 5, "--out-json", work / "bench.json")
bench = json.loads((work / "bench.json").read_text())
print("kernel seconds per run:", bench["kernel_seconds_per_run"])

run("model", "--n", 512, "--b", 1024, "--a", 256, "--P", 16)
