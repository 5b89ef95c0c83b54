import runpy
from pathlib import Path

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


def test_quick_benchmark_runs(capsys):
    ns = runpy.run_path(str(BENCH))
    ns["main"](["--quick"])
    out = capsys.readouterr().out
    for kernel in ("corr fwd", "corr bwd", "warp fwd", "warp bwd"):
        assert kernel in out
