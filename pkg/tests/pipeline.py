"""End-to-end command-line run shared by the CLI and acceptance tests."""
from pathlib import Path

from mmtl.cli import run


def snapshot(root):
    """Relative path -> bytes for every file below ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run_pipeline(root, variant="dec-init", seeds="1", dropout="0.1,0.2,0.2", updates=12):
    """synth -> train -> translate -> evaluate inside ``root``; returns the run directory."""
    root = Path(root)
    data, out = root / "data", root / "run"
    assert run(["synth", "--seed", "7", "--n-train", "40", "--n-valid", "6", "--n-test", "8",
                "--out", str(data)]) == 0
    assert run(["train", "--config", "synthetic", "--synth", str(data), "--variant", variant,
                "--seeds", seeds, "--dropout", dropout, "--max-updates", str(updates),
                "--eval-every", "6", "--batch-size", "8", "--beam", "3",
                "--out", str(out)]) == 0
    first = seeds.split(",")[0]
    assert run(["translate", "--ckpt", str(out / f"seed{first}" / "best.ckpt"),
                "--input", str(data / "test.src"), "--global", str(data / "test.global.mmtf"),
                "--spatial", str(data / "test.spatial.mmtf"), "--beam", "3",
                "--out", str(out / "test")]) == 0
    assert run(["evaluate", "--hyp", str(out / "test" / "hyps.txt"), "--ref", str(data / "test.trg"),
                "--labels", str(data / "test.labels"), "--out", str(out / "eval")]) == 0
    return out
