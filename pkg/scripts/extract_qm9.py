"""Build ``data/qm9.smi.gz`` from the CSV tables shipped in the ``qm9pack`` wheel.

Each molecule is re-written by RDKit as an aromatic (non-kekulized) canonical
SMILES.  Molecules whose canonical form needs bracket atoms (charges, ``[nH]``)
are dropped because the package codec only reads the organic subset.

Usage::

    pip download --no-deps qm9pack -d /tmp/qm9 && unzip /tmp/qm9/*.whl -d /tmp/qm9
    python scripts/extract_qm9.py /tmp/qm9/qm9pack/data data/qm9.smi.gz
"""

import argparse
import csv
import gzip
import sys
from pathlib import Path

from rdkit import Chem, RDLogger


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv_dir", type=Path)
    ap.add_argument("out", type=Path)
    args = ap.parse_args(argv)
    RDLogger.DisableLog("rdApp.*")

    kept = dropped = 0
    with gzip.open(args.out, "wt", encoding="utf-8") as out:
        for part in sorted(args.csv_dir.glob("qm9_part*.csv")):
            with open(part, newline="") as fh:
                for row in csv.DictReader(fh):
                    mol = Chem.MolFromSmiles(row["SMILES"])
                    smi = Chem.MolToSmiles(mol) if mol is not None else None
                    if not smi or "[" in smi or "." in smi:
                        dropped += 1
                        continue
                    out.write(smi + "\n")
                    kept += 1
    print(f"kept {kept}, dropped {dropped}", file=sys.stderr)


if __name__ == "__main__":
    main()
