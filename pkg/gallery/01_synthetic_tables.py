"""Generate a synthetic cohort, write it as CSV tables, and read it back through ingest.

The generator plants disease clusters: each patient draws diagnoses from one
cluster, and with probability beta each emitted symptom, lab, prescription or
procedure comes from that cluster's signature.
"""
import sys
import tempfile
from pathlib import Path

from clinhin.ingest import load_tables
from clinhin.synth import SynthSpec, generate, write_tables

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "synthetic"

dataset = generate(SynthSpec(n_patients=2000, n_clusters=20, beta=0.9, seed=0))
write_tables(dataset, out)
print(f"wrote {len(dataset.stays)} stays to {out}")

stays, report = load_tables(out, out / "table_spec.ini")
print(f"ingest accepted {report.accepted} events, rejected {report.rejected}, "
      f"duplicates {report.duplicates}, excluded stays {report.excluded_stays}")

first = stays[0]
print(f"stay {first.stay_id}:")
for ev in first.events[:12]:
    print("  ", ev.event_type.value, ev.name, "" if ev.value is None else ev.value)
