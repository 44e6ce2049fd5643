"""Run each subcommand once and validate its report against the JSON schema."""
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema

exe, schema_path = sys.argv[1], sys.argv[2]
validator = jsonschema.Draft202012Validator(json.loads(Path(schema_path).read_text()))

with tempfile.TemporaryDirectory() as tmp:
    d = Path(tmp)
    data = ["--data", "data.csv", "--outcome-columns", "active_days,app_opens,time_spent"]
    (d / "a.cfg").write_text("data = data.csv\noutcomes = active_days\nvalidation_outcomes = time_spent\n"
                             "bootstrap = 100\nreport = analyze.json\n")
    runs = {
        "simulate_export": ["simulate", "--n", "1500", "--export-csv", "data.csv"],
        "ingest": ["ingest", "--input", "data.csv", "--output", "shards"],
        "solve": ["solve", *data, "--method", "eb", "--weights-out", "w.csv"],
        "diagnose": ["diagnose", *data, "--weights", "w.csv"],
        "estimate": ["estimate", *data, "--weights", "w.csv", "--method", "eb", "--bootstrap", "100"],
        "simulate": ["simulate", "--n", "500", "--reps", "2", "--methods", "ms,ipw-dr"],
        "error": ["solve", "--data", "missing.csv", "--method", "ms", "--weights-out", "x.csv"],
        "analyze": ["analyze", "--config", "a.cfg"],
    }
    failures = 0
    for name, args in runs.items():
        report = d / f"{name}.json"
        if name != "analyze":
            args = args + ["--report", str(report)]
        else:
            report = d / "analyze.json"
        proc = subprocess.run([exe, *args], cwd=d, capture_output=True, text=True)
        if not report.exists():
            print(f"{name}: no report (exit {proc.returncode}): {proc.stderr.strip()}")
            failures += 1
            continue
        errors = list(validator.iter_errors(json.loads(report.read_text())))
        for e in errors[:5]:
            print(f"{name}: {e.message[:200]} at /{'/'.join(map(str, e.path))}")
        failures += bool(errors)
        print(f"{name}: exit {proc.returncode}, {'valid' if not errors else 'INVALID'}")
    sys.exit(1 if failures else 0)
