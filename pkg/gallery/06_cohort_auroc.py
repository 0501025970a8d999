"""Collapse diagnoses to ICD-9 chapter cohorts and report per-cohort AUROC.

Each cohort becomes a single diagnosis node, so the ranking task turns into
multi-label chapter prediction.
"""
from clinhin.evaluate import predict_cohorts
from clinhin.ingest import collapse_to_cohorts, load_cohort_table, split
from clinhin.synth import SynthSpec, generate
from clinhin.trainer import TrainConfig, fit

table = load_cohort_table()
ds = generate(SynthSpec(n_patients=3000, n_clusters=12, seed=3))
train, test = split(collapse_to_cohorts(ds.stays, table), 0.2, seed=0)
g, model, _ = fit(train, TrainConfig(dim=32))

report = predict_cohorts(model, None, test, table)
for line in report.as_lines():
    print(line)
