#!/usr/bin/env python3
"""Download UCI regression datasets and write them as numeric CSV files with a header row.

Usage: fetch_uci.py NAME [NAME ...] [--dest DIR]

NAME is one of boston, concrete, energy, wine, yacht, or "all". DIR defaults to
$HYVI_DATA_DIR, then ./data. The target column names match the ones hyvi expects.
Excel sources (concrete, energy) need pandas with xlrd/openpyxl.
"""

import argparse
import csv
import io
import os
import sys
import urllib.request
import zipfile

UCI = "https://archive.ics.uci.edu/ml/machine-learning-databases"

BOSTON_COLUMNS = ["CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE", "DIS", "RAD", "TAX", "PTRATIO", "B", "LSTAT",
                  "MEDV"]
CONCRETE_COLUMNS = ["cement", "slag", "fly_ash", "water", "superplasticizer", "coarse_aggregate", "fine_aggregate",
                    "age", "strength"]
ENERGY_COLUMNS = ["relative_compactness", "surface_area", "wall_area", "roof_area", "overall_height", "orientation",
                  "glazing_area", "glazing_area_distribution", "heating_load"]
YACHT_COLUMNS = ["longitudinal_position", "prismatic_coefficient", "length_displacement", "beam_draught",
                 "length_beam", "froude_number", "resistance"]


def download(url):
    with urllib.request.urlopen(url, timeout=60) as response:
        return response.read()


def whitespace_rows(raw, width):
    rows = []
    for line in raw.decode("ascii", "replace").splitlines():
        fields = line.split()
        if not fields:
            continue
        if len(fields) != width:
            raise ValueError(f"expected {width} fields, got {len(fields)}: {line!r}")
        rows.append([float(x) for x in fields])
    return rows


def excel_rows(raw, n_columns):
    import pandas as pd  # only needed for the Excel sources

    frame = pd.read_excel(io.BytesIO(raw))
    frame = frame.dropna(how="all").iloc[:, :n_columns]
    return frame.astype(float).values.tolist()


def fetch_boston():
    return BOSTON_COLUMNS, whitespace_rows(download(f"{UCI}/housing/housing.data"), 14)


def fetch_concrete():
    return CONCRETE_COLUMNS, excel_rows(download(f"{UCI}/concrete/compressive/Concrete_Data.xls"), 9)


def fetch_energy():
    rows = excel_rows(download(f"{UCI}/00242/ENB2012_data.xlsx"), 9)
    return ENERGY_COLUMNS, rows  # first eight features and Y1 (heating load)


def fetch_wine():
    text = download(f"{UCI}/wine-quality/winequality-red.csv").decode("utf-8")
    reader = csv.reader(io.StringIO(text), delimiter=";")
    header = [h.strip().strip('"').replace(" ", "_") for h in next(reader)]
    return header, [[float(x) for x in row] for row in reader if row]


def fetch_yacht():
    return YACHT_COLUMNS, whitespace_rows(download(f"{UCI}/00243/yacht_hydrodynamics.data"), 7)


FETCHERS = {"boston": fetch_boston, "concrete": fetch_concrete, "energy": fetch_energy, "wine": fetch_wine,
            "yacht": fetch_yacht}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("names", nargs="+")
    parser.add_argument("--dest", default=os.environ.get("HYVI_DATA_DIR") or "data")
    args = parser.parse_args()
    names = list(FETCHERS) if args.names == ["all"] else args.names
    os.makedirs(args.dest, exist_ok=True)
    status = 0
    for name in names:
        if name not in FETCHERS:
            print(f"fetch_uci: unknown dataset {name!r}", file=sys.stderr)
            status = 2
            continue
        try:
            header, rows = FETCHERS[name]()
        except Exception as err:  # network, HTTP or format failures
            print(f"fetch_uci: {name}: {err}", file=sys.stderr)
            status = 1
            continue
        path = os.path.join(args.dest, f"{name}.csv")
        with open(path, "w", newline="") as out:
            writer = csv.writer(out)
            writer.writerow(header)
            writer.writerows(rows)
        print(f"{name}: {len(rows)} rows x {len(header) - 1} features -> {path}")
    return status


if __name__ == "__main__":
    sys.exit(main())
