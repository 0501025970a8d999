"""MAP@k on held-out stays, against a baseline that ranks diagnoses by training frequency."""
from clinhin.evaluate import degree_ranker, evaluate_ranking
from clinhin.ingest import load_cohort_table, split
from clinhin.synth import SynthSpec, generate
from clinhin.trainer import TrainConfig, fit

ds = generate(SynthSpec(n_patients=5000, n_clusters=20, beta=0.9, seed=0))
train, test = split(ds.stays, 0.1, seed=0)
g, model, _ = fit(train, TrainConfig(dim=64))

report = evaluate_ranking(model, test, ks=(1, 3, 5, 10), cohort_table=load_cohort_table())
baseline = evaluate_ranking(model, test, ks=(1, 3, 5, 10), ranker=degree_ranker(g))
print(f"{'k':>3} {'model':>8} {'degree':>8}")
for k in report.ks:
    print(f"{k:>3} {report.map[k]:8.3f} {baseline.map[k]:8.3f}")
print(f"top-1 cohort accuracy {report.top1_cohort_accuracy:.3f}; "
      f"{report.evaluated} evaluated, {report.cold} cold, {report.no_truth} without diagnoses")
