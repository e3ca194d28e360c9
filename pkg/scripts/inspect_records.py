"""
Print a record store as a pandas table: one row per sample with its soft
labels and per-tap feature statistics.

    python scripts/inspect_records.py runs/run-pipeline/teacher_records.kdrs
    python scripts/inspect_records.py teacher_records.kdrs --describe --csv out.csv
"""
import argparse
import sys
from pathlib import Path

import pandas as pd

# ---------------------------------------
# Project Structure
# ---------------------------------------
PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from src.core import RecordStoreError  # noqa: E402
from src.distill import RecordStore  # noqa: E402

pd.set_option('display.max_columns', None)
pd.set_option('display.width', 160)


def records_frame(path: Path) -> pd.DataFrame:
    store = RecordStore.read(path)
    print(f"{path.name}: {len(store)} records from {store.producer_role.value} "
          f"{store.producer_checksum[:12]} (T={store.temperature}, mode={store.mode.value})")
    for name, shape in store.tap_shapes.items():
        print(f"  tap {name}: {shape}")
    return store.to_frame()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description='Inspect a distillation record store')
    parser.add_argument('path', type=Path, help='.kdrs record store')
    parser.add_argument('--describe', action='store_true', help='print summary statistics instead of rows')
    parser.add_argument('--csv', type=Path, help='also write the table to this CSV file')
    args = parser.parse_args(argv)

    try:
        df = records_frame(args.path)
    except (OSError, RecordStoreError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 1

    print(df.describe() if args.describe else df)
    if args.csv:
        df.to_csv(args.csv, index=False)
        print(f"[OK] Wrote {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
