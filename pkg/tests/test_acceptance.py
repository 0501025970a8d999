"""Acceptance suite: one test per criterion, each reporting a pass/fail line in the terminal summary."""
import dataclasses
import time
from collections import Counter

import numpy as np
import pytest

from clinhin.cli import EXIT_LEAKAGE, main
from clinhin.embedding import EmbeddingModel, unsup_gradients, unsup_loss
from clinhin.events import ClinicalEvent, NodeType
from clinhin.evaluate import ap_at_k, auroc, degree_ranker, evaluate_ranking, map_at_k
from clinhin.graph import KNOWN_PATHS, PathSchema, build_graph, enumerate_path_pairs
from clinhin.ingest import PatientStay, load_cohort_table, split, write_stays
from clinhin.sampling import NegativeSampler, PositiveSampler
from clinhin.synth import SynthSpec, generate
from clinhin.trainer import TrainConfig, Trainer, fit, patient_vector, sup_gradients, sup_loss
import clinhin.sampling as sampling_module

from conftest import central_difference, relative_error

# ---------------------------------------------------------------- shared fixtures


def _grad_fixture_graph(rng):
    stays = []
    for i in range(6):
        events = [ClinicalEvent("lab", f"L{j}", "abnormal") for j in rng.choice(6, 3, replace=False)]
        events += [ClinicalEvent("symp", f"s{j}") for j in rng.choice(5, 2, replace=False)]
        events += [ClinicalEvent("age", "age", float(rng.integers(15, 90)))]
        events += [ClinicalEvent("diag", f"{401 + j}0") for j in rng.choice(8, 2, replace=False)]
        stays.append(PatientStay(f"p{i}", events))
    return build_graph(stays)


def _sampler_fixture_graph():
    """43 nodes, every event type present, overlapping neighbourhoods."""
    rng = np.random.default_rng(2024)
    sizes = {"lab": 5, "symp": 5, "diag": 6, "pres": 4, "proc": 3, "micro": 3}
    stays = []
    for i in range(10):
        events = [ClinicalEvent("gen", "F" if i % 2 else "M"),
                  ClinicalEvent("age", "age", [20, 40, 70][i % 3]),
                  ClinicalEvent("eth", f"e{i % 2}")]
        for t, n in sizes.items():
            k = int(rng.integers(1, 4))
            for j in sorted(rng.choice(n, size=min(k, n), replace=False).tolist()):
                if t == "lab":
                    events.append(ClinicalEvent(t, f"L{j}", "abnormal"))
                elif t == "micro":
                    events.append(ClinicalEvent(t, f"M{j}", "sensitive"))
                elif t in ("diag", "proc"):
                    events.append(ClinicalEvent(t, f"{101 + j}0"))
                else:
                    events.append(ClinicalEvent(t, f"{t}{j}"))
        stays.append(PatientStay(f"p{i}", events))
    return build_graph(stays)


def tv_distance(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


@pytest.fixture(scope="module")
def planted():
    """The 5,000-patient, 20-cluster, beta=0.9 synthetic dataset, split 90/10."""
    ds = generate(SynthSpec(n_patients=5000, n_clusters=20, beta=0.9, seed=0))
    return split(ds.stays, 0.1, seed=0)


@pytest.fixture(scope="module")
def null_data():
    ds = generate(SynthSpec(n_patients=5000, n_clusters=20, beta=0.0, seed=0))
    return split(ds.stays, 0.1, seed=0)


def _planted_config(**kw):
    return dataclasses.replace(TrainConfig(dim=64), **kw)


def paired_sign_flip_pvalue(a, b, n_perm=20_000, seed=0):
    """Two-sided p-value for mean(a - b) = 0 under random sign flips of the paired differences."""
    d = np.asarray(a) - np.asarray(b)
    observed = abs(d.mean())
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(n_perm, len(d)))
    null = np.abs((signs * d).mean(axis=1))
    return (1 + np.sum(null >= observed - 1e-15)) / (n_perm + 1)


# ---------------------------------------------------------------- 1. gradients


def test_criterion_1_gradient_suite(criterion):
    criterion(1, "analytic gradients match central finite differences")
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_unsup = 0.0
    for _ in range(100):
        m = EmbeddingModel(rng.normal(scale=0.5, size=(10, 8)), np.ones(6))
        v, c = 0, 1
        negs = list(rng.choice(np.arange(2, 10), size=5, replace=False))
        gv, gc, gu = unsup_gradients(m, v, c, negs)
        for node, g in [(v, gv), (c, gc)] + list(zip(negs, gu)):
            num = central_difference(lambda: unsup_loss(m, v, c, negs), m.vectors[node])
            worst_unsup = max(worst_unsup, relative_error(g, num))

    worst_sup = worst_w = 0.0
    instances = 0
    while instances < 100:
        g = _grad_fixture_graph(rng)
        model = EmbeddingModel(rng.normal(scale=0.5, size=(len(g), 8)), rng.normal(size=6), g.keys)
        p = int(rng.choice(g.patients))
        true = g.neighbors(p, NodeType.DIAGNOSIS)
        others = np.setdiff1d(g.nodes_of_type(NodeType.DIAGNOSIS), true)
        negs = rng.choice(others, size=min(4, len(others)), replace=False)
        d_pos = int(true[0])
        fp = patient_vector(model, g, p)
        slack = model.vectors[negs] @ fp - model.vectors[d_pos] @ fp + 1.0
        if np.abs(slack).min() < 1e-3 or not (slack > 0).any():
            continue  # hinge kink or zero subgradient: nothing to check
        grads, gw = sup_gradients(model, g, p, d_pos, negs, 1.0)
        loss = lambda: sup_loss(model, g, p, d_pos, negs, 1.0)
        for node, grad in grads.items():
            worst_sup = max(worst_sup, relative_error(grad, central_difference(loss, model.vectors[node])))
        worst_w = max(worst_w, relative_error(gw, central_difference(loss, model.type_weights)))
        instances += 1
    elapsed = time.perf_counter() - t0
    criterion.detail(f"unsup max rel err {worst_unsup:.2e}, sup vectors {worst_sup:.2e}, "
                     f"type weights {worst_w:.2e}, {elapsed:.1f}s")
    assert worst_unsup < 1e-5 and worst_sup < 1e-5 and worst_w < 1e-5
    assert elapsed < 10


# ---------------------------------------------------------------- 2. samplers


def test_criterion_2_sampler_fidelity(criterion):
    criterion(2, "positive and negative samplers match their oracles")
    t0 = time.perf_counter()
    g = _sampler_fixture_graph()
    assert len(g) <= 50
    rng = np.random.default_rng(7)
    n = 100_000
    paths = list(KNOWN_PATHS.values()) + [
        PathSchema((NodeType.SYMPTOM, NodeType.PATIENT, NodeType.SYMPTOM)),
        PathSchema((NodeType.LABORATORY, NodeType.PATIENT, NodeType.LABORATORY)),
    ]
    worst_pos = 0.0
    for path in paths:
        pairs = list(enumerate_path_pairs(g, path))
        total = sum(m for *_, m in pairs)
        oracle = {(v, c): m / total for v, c, m in pairs}
        v, c = PositiveSampler(g, path).sample(rng, n)
        if path.is_metapath and path.source is path.dest:
            v, c = np.minimum(v, c), np.maximum(v, c)
        counts = Counter(zip(v.tolist(), c.tolist()))
        empirical = {k: cnt / n for k, cnt in counts.items()}
        worst_pos = max(worst_pos, tv_distance(empirical, oracle))

    worst_neg = 0.0
    for t in (NodeType.LABORATORY, NodeType.SYMPTOM, NodeType.DIAGNOSIS, NodeType.PRESCRIPTION,
              NodeType.PROCEDURE, NodeType.MICROBIOLOGY, NodeType.AGE):
        nodes = g.nodes_of_type(t)
        for alpha in (1.0, 0.75, 0.0):
            sampler = NegativeSampler(g, t, alpha)
            w = g.degree[nodes].astype(float) ** alpha
            oracle = dict(zip(nodes.tolist(), w / w.sum()))
            draws = sampler.sample(rng, n)
            empirical = {k: cnt / n for k, cnt in Counter(draws.tolist()).items()}
            worst_neg = max(worst_neg, tv_distance(empirical, oracle))
            excl = int(nodes[0])
            draws = sampler.sample(rng, n, exclude=np.full(n, excl))
            assert excl not in draws
            w_ex = np.where(nodes == excl, 0.0, w)
            oracle = dict(zip(nodes.tolist(), w_ex / w_ex.sum()))
            empirical = {k: cnt / n for k, cnt in Counter(draws.tolist()).items()}
            worst_neg = max(worst_neg, tv_distance(empirical, oracle))
    elapsed = time.perf_counter() - t0
    criterion.detail(f"{len(paths)} schemas, max positive TV {worst_pos:.4f}, "
                     f"max negative TV {worst_neg:.4f}, {elapsed:.1f}s")
    assert worst_pos <= 0.02 and worst_neg <= 0.02
    assert elapsed < 30


# ---------------------------------------------------------------- 3. metrics


def _brute_ap(ranked, truth, k):
    hits, precisions = 0, []
    for i in range(min(k, len(ranked))):
        if ranked[i] in truth:
            hits += 1
            precisions.append(hits / (i + 1))
    return sum(precisions) / len(precisions) if precisions else 0.0


def _brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_criterion_3_metric_oracles(criterion):
    criterion(3, "ap_at_k / map_at_k / auroc equal brute-force recomputation")
    hand = ap_at_k(["a", "b", "c"], {"a", "c"}, 3)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        ranked = rng.permutation(n).tolist()
        truth = set(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
        k = int(rng.integers(1, n + 3))
        worst = max(worst, abs(ap_at_k(ranked, truth, k) - _brute_ap(ranked, truth, k)))

        preds = [rng.permutation(n).tolist() for _ in range(int(rng.integers(1, 6)))]
        truths = [set(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist()) for _ in preds]
        brute_map = sum(_brute_ap(p, t, k) for p, t in zip(preds, truths)) / len(preds)
        worst = max(worst, abs(map_at_k(preds, truths, k) - brute_map))

        m = int(rng.integers(2, 60))
        scores = np.round(rng.normal(size=m), int(rng.integers(0, 3)))  # rounding forces ties
        labels = rng.integers(0, 2, size=m)
        labels[0], labels[1] = 0, 1
        worst = max(worst, abs(auroc(scores, labels) - _brute_auroc(scores.tolist(), labels.tolist())))
    criterion.detail(f"hand case {hand:.15f}, max deviation {worst:.1e} over 1000 cases")
    assert abs(hand - 5 / 6) < 1e-12
    assert worst < 1e-12


# ---------------------------------------------------------------- 4. planted recovery


def test_criterion_4_planted_structure_recovery(criterion, planted):
    criterion(4, "planted-structure recovery on synthetic data")
    train, test = planted
    t0 = time.perf_counter()
    g, model, _ = fit(train, _planted_config())
    elapsed = time.perf_counter() - t0
    table = load_cohort_table()
    report = evaluate_ranking(model, test, ks=(3,), cohort_table=table)
    baseline = evaluate_ranking(model, test, ks=(3,), ranker=degree_ranker(g))
    gap = report.map[3] - baseline.map[3]
    criterion.detail(f"MAP@3 {report.map[3]:.3f}, top-1 cohort acc {report.top1_cohort_accuracy:.3f}, "
                     f"degree baseline {baseline.map[3]:.3f} (gap {gap:.3f}), train {elapsed:.0f}s")
    assert report.map[3] >= 0.70
    assert report.top1_cohort_accuracy >= 0.90
    assert gap >= 0.25
    assert elapsed < 300


# ---------------------------------------------------------------- 5. ablation direction


def _per_patient_ap(train, test, schemas):
    _, model, _ = fit(train, _planted_config(schemas=schemas))
    report = evaluate_ranking(model, test, ks=(3,))
    return report.patient_ids, report.ap[3]


def test_criterion_5_ablation_direction(criterion, planted, null_data):
    criterion(5, "lab-diag + symp-diag metapaths beat no metapaths; null on beta=0")
    with_ids, with_mp = _per_patient_ap(*planted, ("lab-diag", "symp-diag"))
    without_ids, without_mp = _per_patient_ap(*planted, ())
    assert with_ids == without_ids
    gain = with_mp.mean() - without_mp.mean()

    ids0, null_with = _per_patient_ap(*null_data, ("lab-diag", "symp-diag"))
    ids1, null_without = _per_patient_ap(*null_data, ())
    assert ids0 == ids1
    p_null = paired_sign_flip_pvalue(null_with, null_without)
    criterion.detail(f"beta=0.9 MAP@3 {with_mp.mean():.3f} vs {without_mp.mean():.3f} (gain {gain:+.3f}); "
                     f"beta=0 gain {null_with.mean() - null_without.mean():+.4f}, permutation p={p_null:.3f}")
    assert p_null > 0.05
    assert gain >= 0.05


# ---------------------------------------------------------------- 6. joint-objective reductions


def _tiny_graph():
    rng = np.random.default_rng(6)
    stays = []
    for i in range(8):
        events = [ClinicalEvent("lab", f"L{j}", "abnormal") for j in rng.choice(5, 2, replace=False)]
        events += [ClinicalEvent("symp", f"s{j}") for j in rng.choice(4, 2, replace=False)]
        events += [ClinicalEvent("diag", f"{401 + j}0") for j in rng.choice(6, 2, replace=False)]
        events += [ClinicalEvent("pres", f"d{j}") for j in rng.choice(3, 1, replace=False)]
        stays.append(PatientStay(f"p{i}", events))
    return build_graph(stays)


def test_criterion_6_joint_objective_reductions(criterion, monkeypatch):
    criterion(6, "omega=1 / omega=0 reductions and branch frequency")
    g = _tiny_graph()
    small = dict(dim=8, batch=8, negatives=3, unsup_negatives=2, seed=11)

    pure_unsup = Trainer(g, TrainConfig(omega=1.0, epochs=300, **small))
    w0 = pure_unsup.model.type_weights.tobytes()
    pure_unsup.run()
    weights_frozen = pure_unsup.model.type_weights.tobytes() == w0

    calls = []
    original = sampling_module.PositiveSampler.sample

    def spy(self, rng, size):
        calls.append(size)
        return original(self, rng, size)

    monkeypatch.setattr(sampling_module.PositiveSampler, "sample", spy)
    pure_sup = Trainer(g, TrainConfig(omega=0.0, epochs=300, **small))
    v0 = pure_sup.model.vectors.copy()
    pure_sup.run()
    monkeypatch.undo()
    no_path_draws = not calls and pure_sup.stats.path_calls == {}
    moved = not np.array_equal(v0, pure_sup.model.vectors)

    mixed = Trainer(g, TrainConfig(omega=0.8, epochs=100_000, **small))
    assert mixed.total_steps == 100_000
    mixed.run()
    freq = mixed.stats.unsup_steps / mixed.stats.steps
    criterion.detail(f"w_t bitwise frozen at omega=1: {weights_frozen}; path draws at omega=0: {len(calls)}; "
                     f"unsupervised frequency {freq:.4f} over {mixed.stats.steps} steps")
    assert weights_frozen
    assert no_path_draws and moved
    assert abs(freq - 0.8) <= 0.01


# ---------------------------------------------------------------- 7. determinism and persistence


def test_criterion_7_determinism_and_persistence(criterion, tmp_path):
    criterion(7, "bitwise-identical reruns; text save-load-save is identical")
    ds = generate(SynthSpec(n_patients=1500, seed=21))
    train, _ = split(ds.stays, 0.1, seed=0)
    config = TrainConfig(dim=32, epochs=20, seed=99, deterministic=True)
    texts, bins = [], []
    for run in range(2):
        _, model, _ = fit(train, config)
        model.save_text(tmp_path / f"run{run}.txt")
        model.save_binary(tmp_path / f"run{run}.bin")
        texts.append((tmp_path / f"run{run}.txt").read_bytes())
        bins.append((tmp_path / f"run{run}.bin").read_bytes())
    EmbeddingModel.load(tmp_path / "run0.txt").save_text(tmp_path / "again.txt")
    EmbeddingModel.load(tmp_path / "run0.bin").save_text(tmp_path / "from_bin.txt")
    again = (tmp_path / "again.txt").read_bytes()
    from_bin = (tmp_path / "from_bin.txt").read_bytes()
    criterion.detail(f"text identical {texts[0] == texts[1]}, binary identical {bins[0] == bins[1]}, "
                     f"save-load-save identical {again == texts[0]}")
    assert texts[0] == texts[1] and bins[0] == bins[1]
    assert again == texts[0] and from_bin == texts[0]


# ---------------------------------------------------------------- 8. leakage guard


def _adversarial_fixtures(rng):
    known = [("symp", "symptom_000", None), ("lab", "lab_001", "abnormal"), ("lab", "lab_002", "normal"),
             ("gen", "F", None), ("age", "age", 44.0), ("symp", "never seen", None)]
    treatments = [("pres", "drug_000", None), ("pres", "unknown drug", None), ("proc", "1001", None),
                  ("proc", "9999", None), ("diag", "0011", None), ("diag", "V011", None),
                  ("diag", "4280", None), ("pres", "DRUG_001", None)]
    fixtures = []
    for i in range(50):
        base = [known[j] for j in rng.choice(len(known), size=int(rng.integers(0, 4)), replace=False)]
        leaks = [treatments[j] for j in rng.choice(len(treatments), size=int(rng.integers(1, 3)), replace=False)]
        events = base + leaks
        rng.shuffle(events)
        fixtures.append(PatientStay(f"adv{i}", [ClinicalEvent(*e) for e in events]))
    return fixtures


def test_criterion_8_leakage_guard(criterion, tmp_path, capsys):
    criterion(8, "treatment events in prediction input abort with the leakage exit code")
    ds = generate(SynthSpec(n_patients=200, seed=8))
    _, model, _ = fit(ds.stays, TrainConfig(dim=8, epochs=2))
    model.save_text(tmp_path / "model.txt")
    fixtures = _adversarial_fixtures(np.random.default_rng(8))
    codes = []
    for i, fx in enumerate(fixtures):
        path = tmp_path / f"adv{i}.jsonl"
        # the leaking patient sits between clean ones, so partial output would be visible
        clean = PatientStay("clean", [ClinicalEvent("symp", "symptom_000")])
        write_stays(path, [clean, fx, clean])
        codes.append(main(["predict", str(tmp_path / "model.txt"), str(path), "--k", "5"]))
    out = capsys.readouterr().out
    aborted = sum(c == EXIT_LEAKAGE for c in codes)
    criterion.detail(f"{aborted}/{len(fixtures)} fixtures aborted with exit code {EXIT_LEAKAGE}")
    assert aborted == len(fixtures) == 50
    assert out == ""
