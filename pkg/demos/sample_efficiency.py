"""Sample efficiency of planar, p4 and p4m networks on the pentomino task.

The task plants four pentominoes in each 33x33 image.  Only the L piece (in any
of its eight roto-reflections) is foreground; I, T, U and X pieces share its
colour and texture.  A planar network has to learn eight L templates, while a
p4m network learns one and gets the rest from weight sharing.

Each (model, regime, seed) run is printed as it finishes, then the grid of mean
test Dice scores.  Rows are also appended to ``trend.jsonl`` in the output
directory.  Expect about 40 minutes on one core; ``--quick`` runs one seed.

    python3 demos/sample_efficiency.py --out runs/trend
"""
import argparse
import json
from pathlib import Path

from gcnnseg.experiment import TrendConfig, run_trend

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", default="runs/trend")
parser.add_argument("--quick", action="store_true", help="one seed instead of three")
args = parser.parse_args()

out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
rows_path = out / "trend.jsonl"
rows_path.write_text("")
config = TrendConfig(seeds=(0,)) if args.quick else TrendConfig()


def show(row):
    print(f"{row['group']:>4} fraction {row['fraction']:<6} seed {row['seed']}  "
          f"test DSC {row['dsc']:.3f}  best epoch {row['best_epoch']:>2}  {row['seconds']:.0f}s", flush=True)
    with open(rows_path, "a") as fh:
        fh.write(json.dumps(row) + "\n")


result = run_trend(config, progress=show)
print()
print(result.table())
print()
for frac in (1.0, 0.125):
    print(f"p4m - p1 gap at {frac}: {100 * result.gap(frac):+.1f} points")
print(f"p4m - p4 gap at 1: {100 * result.gap(1.0, 'p4m', 'p4'):+.1f} points")
