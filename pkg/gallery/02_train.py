"""Build the patient/event network from training stays and fit embeddings.

Training alternates between the unsupervised path objective (prob. omega) and
the supervised diagnosis hinge loss. The default configuration uses the
lab-diag, symp-diag, lab-symp and lab-pres metapaths.
"""
import time

from clinhin.ingest import split
from clinhin.synth import SynthSpec, generate
from clinhin.trainer import TrainConfig, fit

stays = generate(SynthSpec(n_patients=3000, seed=1)).stays
train, test = split(stays, 0.1, seed=0)

config = TrainConfig(dim=64, epochs=100, seed=7)
t0 = time.perf_counter()
g, model, stats = fit(train, config)
print(f"graph: {len(g)} nodes, {g.num_edges} edges, {len(g.patients)} patients")
print(f"{stats.steps} steps ({stats.unsup_steps} unsupervised, {stats.sup_steps} supervised) "
      f"in {time.perf_counter() - t0:.1f}s")
print("active schemas:", ", ".join(stats.active_schemas))
print("path draws per schema:", stats.path_calls)
print("type weights:", " ".join(f"{w:.3f}" for w in model.type_weights))
