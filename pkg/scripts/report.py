"""Render every run directory given on the command line to report.md plus charts."""

import argparse
from pathlib import Path

from nexagon.report import render


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dirs", type=Path, nargs="+")
    for d in ap.parse_args().run_dirs:
        print(render(d))


if __name__ == "__main__":
    main()
