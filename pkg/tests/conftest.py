import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from posestitch import cli
from posestitch.pose_core import save_pose_sequence
from posestitch.synthcorpus import carve_protocol, read_corpus

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.conf"

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@dataclass
class PipelineRun:
    root: Path
    seconds: float

    def cfg(self, **overrides):
        return cli.load_config(str(TOY_CONFIG), self.overrides(**overrides))

    def overrides(self, **extra):
        r = self.root
        base = {
            "corpus_dir": str(r / "corpus"), "ae_checkpoint": str(r / "ae.params"),
            "diff_checkpoint": str(r / "diff.params"), "stitch_output": str(r / "stitched.poseseq"),
            "report_path": str(r / "report.txt"), "render_input": str(r / "stitched.poseseq"),
            "render_dir": str(r / "frames"),
            "segments": f"{r / 'segments' / 'seg_0.poseseq'},{r / 'segments' / 'seg_1.poseseq'}",
        }
        base.update({k: str(v) for k, v in extra.items()})
        return base

    def argv(self, command, **extra):
        out = [command, "-c", str(TOY_CONFIG)]
        for k, v in self.overrides(**extra).items():
            out += [f"--{k}", v]
        return out


def run_toy_pipeline(root: Path) -> PipelineRun:
    """gen-corpus -> pretrain-ae -> train-diff -> stitch -> eval with the toy config."""
    if root.exists():
        shutil.rmtree(root)
    root.mkdir(parents=True)
    run = PipelineRun(root, 0.0)
    start = time.perf_counter()
    for command in ("gen-corpus", "pretrain-ae", "train-diff"):
        assert cli.run(run.argv(command)) == 0, command
    heldout = read_corpus(root / "corpus", "heldout")[0]
    segs, _ = carve_protocol(heldout, 20, 10)
    (root / "segments").mkdir()
    for i, seg in enumerate(segs.segments[:2]):
        save_pose_sequence(seg, root / "segments" / f"seg_{i}.poseseq")
    for command in ("stitch", "eval"):
        assert cli.run(run.argv(command)) == 0, command
    run.seconds = time.perf_counter() - start
    return run


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> PipelineRun:
    return run_toy_pipeline(tmp_path_factory.mktemp("toy") / "run")
