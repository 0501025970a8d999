"""Rank diagnoses for new patients from their diagnostic events alone.

A patient vector is the weighted sum over diagnostic types of the mean
embedding of the patient's known events. Treatment events in the input are
refused: they would leak the answer.
"""
from clinhin.evaluate import LeakageError, compose_patient, diagnostic_events, format_prediction, rank_diagnoses
from clinhin.ingest import split
from clinhin.synth import SynthSpec, generate
from clinhin.trainer import TrainConfig, fit

ds = generate(SynthSpec(n_patients=2000, seed=2))
train, test = split(ds.stays, 0.1, seed=0)
_, model, _ = fit(train, TrainConfig(dim=32, epochs=100))

for stay in test[:5]:
    vec = compose_patient(model, diagnostic_events(stay))
    pred = rank_diagnoses(model, None, vec, k=3, patient_id=stay.stay_id)
    truth = sorted(e.name for e in stay.of_type("diag"))
    print(format_prediction(model, pred).replace("\t", "  "), "| true:", " ".join(truth))

try:
    compose_patient(model, test[0].events)
except LeakageError as exc:
    print("refused:", exc)
