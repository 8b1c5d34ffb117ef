#!/usr/bin/env python3
"""Runs every CLI command on the bundled data and validates the reports."""

import csv
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema


def record_order(pairs, unsorted):
    keys = [k for k, _ in pairs]
    if keys != sorted(keys):
        unsorted.append(keys[:3])
    return dict(pairs)


def main():
    cli, schema_path, data = sys.argv[1], Path(sys.argv[2]), Path(sys.argv[3])
    schema = json.loads(schema_path.read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    validator = jsonschema.Draft202012Validator(schema)
    failures = []
    plots = Path(tempfile.mkdtemp(prefix="jointpo_plots_"))

    sites = str(data / "multi_site_demo.csv")
    runs = {
        "estimate outcome": ["estimate", "--input", str(data / "toy_two_trial.csv")],
        "estimate surrogate boot": ["estimate", "--input", sites, "--space", "surrogate", "--boot", "50",
                                    "--seed", "1", "--plot-data", str(plots / "estimate")],
        "estimate composite": ["estimate", "--input", sites, "--space", "composite", "--mono-s", "--project"],
        "test": ["test", "--input", sites, "--boot", "60", "--seed", "2", "--plot-data", str(plots / "test")],
        "psace 1": ["psace", "--input", sites, "--method", "1", "--boot", "40", "--seed", "3",
                    "--plot-data", str(plots / "psace1")],
        "psace 2": ["psace", "--input", sites, "--method", "2"],
        "psace 3": ["psace", "--input", sites, "--method", "3"],
        "psace 4": ["psace", "--input", sites, "--method", "4", "--mono-s", "--boot", "30", "--seed", "4",
                    "--plot-data", str(plots / "psace4")],
        "target": ["target", "--input", str(data / "target_demo.csv"), "--boot", "30", "--seed", "5"],
        "simulate": ["simulate", "--case", "c4", "--ng", "100", "--reps", "4", "--boot", "10", "--seed", "6",
                     "--timing"],
    }
    for name, args in runs.items():
        proc = subprocess.run([cli, *args], capture_output=True, text=True)
        if proc.returncode != 0:
            failures.append(f"{name}: exit {proc.returncode}: {proc.stderr.strip()}")
            continue
        unsorted = []
        report = json.loads(proc.stdout, object_pairs_hook=lambda pairs: record_order(pairs, unsorted))
        for error in validator.iter_errors(report):
            failures.append(f"{name}: {error.json_path}: {error.message}")
        if unsorted:
            failures.append(f"{name}: keys out of order in an object starting {unsorted[0]}")

    headers = {
        "estimate/linearity.tsv": ["trial", "control_s=0", "control_s=1", "treated", "fitted", "residual", "sigma"],
        "estimate/ate.tsv": ["trial", "control_mean", "treated_mean", "difference"],
        "test/linearity.tsv": ["trial", "control_y=0", "control_y=1", "treated", "fitted", "residual", "sigma"],
        "psace1/psace_intervals.tsv": ["stratum", "trial", "estimate", "ci_lower", "ci_upper"],
        "psace4/psace_intervals.tsv": ["stratum", "trial", "estimate", "ci_lower", "ci_upper"],
        "psace4/joint_intervals.tsv": ["trial", "s0", "s1", "y0", "y1", "status", "estimate", "ci_lower", "ci_upper"],
    }
    for rel, expected in headers.items():
        path = plots / rel
        if not path.exists():
            failures.append(f"{rel}: missing")
            continue
        with path.open(newline="") as handle:
            rows = list(csv.reader(handle, delimiter="\t"))
        if rows[0] != expected:
            failures.append(f"{rel}: header {rows[0]}")
        for row in rows[1:]:
            if len(row) != len(expected):
                failures.append(f"{rel}: ragged row {row}")
                break
            for cell in row[len(expected) - 2:]:
                if cell != "NA":
                    float(cell)

    proc = subprocess.run([cli, "psace", "--input", str(data / "toy_two_trial.csv"), "--method", "1"],
                          capture_output=True, text=True)
    error = json.loads(proc.stderr)["error"]
    if proc.returncode != 2 or error["exit_code"] != 2 or not error["message"]:
        failures.append("error report for surrogate-free psace")

    for line in failures:
        print("FAIL", line)
    print(f"{len(runs)} reports checked, {len(failures)} problems")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
