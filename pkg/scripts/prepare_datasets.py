"""Rebuild the dataset files bundled under ``src/icexplain/datasets``.

The raw files come from redistributed copies of the public UCI / ProPublica
data:

* ``adult/adult.data`` and ``adult/adult.test`` (UCI Adult), plus
  ``compas/compas-scores-two-years.csv`` (ProPublica), as shipped inside the
  ``responsibly`` wheel (0.1.3).
* ``amazon.json``, ``imdb.json``, ``yelp.json`` (UCI Sentiment Labelled
  Sentences), as shipped in the ``sentiment`` npm package (5.0.2) test fixtures.
* ``UCI_Credit_Card.csv`` (a 6000-row, 4-column extract of UCI "default of
  credit card clients"), as shipped inside the ``skorecard`` wheel (1.6.9).

Usage::

    python scripts/prepare_datasets.py /path/to/upstream

where the directory holds the files listed above.
"""

import argparse
import gzip
import json
from pathlib import Path

import pandas as pd

OUT = Path(__file__).resolve().parents[1] / "src" / "icexplain" / "datasets"

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num", "marital_status",
    "occupation", "relationship", "race", "sex", "capital_gain", "capital_loss",
    "hours_per_week", "native_country", "income",
]


def adult(src: Path) -> None:
    frames = []
    for name, split, skip in (("adult.data", "train", 0), ("adult.test", "test", 1)):
        df = pd.read_csv(src / "adult" / name, names=ADULT_COLUMNS, skipinitialspace=True,
                         skiprows=skip, dtype=str)
        df = df.dropna(subset=["income"])
        df["income"] = df["income"].str.rstrip(".")
        df["split"] = split
        frames.append(df)
    df = pd.concat(frames, ignore_index=True)
    with gzip.open(OUT / "adult.csv.gz", "wt", newline="") as fh:
        df.to_csv(fh, index=False)


def recidivism(src: Path) -> None:
    df = pd.read_csv(src / "compas" / "compas-scores-two-years.csv")
    # ProPublica's screening filter; leaves 6172 defendants
    df = df[(df.days_b_screening_arrest <= 30) & (df.days_b_screening_arrest >= -30)
            & (df.is_recid != -1) & (df.c_charge_degree != "O") & (df.score_text != "N/A")]
    los = pd.to_datetime(df.c_jail_out) - pd.to_datetime(df.c_jail_in)
    out = pd.DataFrame({
        "age": df.age,
        "priors_count": df.priors_count,
        "juv_fel_count": df.juv_fel_count,
        "juv_misd_count": df.juv_misd_count,
        "length_of_stay": los.dt.days,
        "c_charge_degree": df.c_charge_degree,
        "violence_risk": df.v_score_text,
    })
    out.to_csv(OUT / "recidivism.csv", index=False)


def credit(src: Path) -> None:
    df = pd.read_csv(src / "UCI_Credit_Card.csv")
    df.to_csv(OUT / "credit.csv", index=False)


def sentiment(src: Path) -> None:
    names = {"amazon": "amazon_cells_labelled.txt", "imdb": "imdb_labelled.txt",
             "yelp": "yelp_labelled.txt"}
    for key, fname in names.items():
        rows = json.loads((src / f"{key}.json").read_text())
        with open(OUT / fname, "w", newline="") as fh:
            for row in rows:
                if row.get("class") not in (0, 1) or not row.get("text"):
                    continue
                fh.write(f"{row['text'].strip()}\t{row['class']}\n")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("upstream", type=Path)
    args = parser.parse_args()
    OUT.mkdir(parents=True, exist_ok=True)
    adult(args.upstream)
    recidivism(args.upstream)
    credit(args.upstream)
    sentiment(args.upstream)


if __name__ == "__main__":
    main()
