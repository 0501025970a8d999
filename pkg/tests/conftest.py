import numpy as np
import pytest

from clinhin.events import ClinicalEvent, NodeType
from clinhin.ingest import PatientStay


def stay(stay_id, *events):
    return PatientStay(stay_id, [ClinicalEvent(*e) for e in events])


@pytest.fixture
def tiny_stays():
    """Six patients over a handful of labs, symptoms, prescriptions and diagnoses."""
    return [
        stay("p1", ("lab", "Glucose", "abnormal"), ("lab", "Sodium", "normal"), ("symp", "fever"),
             ("pres", "insulin"), ("diag", "2500"), ("diag", "4280"), ("gen", "F")),
        stay("p2", ("lab", "Glucose", "abnormal"), ("symp", "fever"), ("symp", "cough"),
             ("diag", "2500"), ("gen", "M"), ("age", "age", 70)),
        stay("p3", ("lab", "Sodium", "normal"), ("symp", "cough"), ("pres", "heparin"),
             ("proc", "9604"), ("diag", "4280"), ("gen", "F")),
        stay("p4", ("lab", "Troponin", "abnormal"), ("symp", "chest pain"), ("pres", "heparin"),
             ("diag", "4280"), ("diag", "4019"), ("micro", "StaphAureus", "resistant")),
        stay("p5", ("lab", "Troponin", "abnormal"), ("lab", "Glucose", "abnormal"), ("symp", "chest pain"),
             ("diag", "4019"), ("age", "age", 45), ("eth", "white")),
        stay("p6", ("symp", "fever"), ("lab", "Sodium", "normal"), ("diag", "0389"), ("pres", "vancomycin"),
             ("eth", "black")),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_stays(rng, n_patients=8, vocab=None, max_per_type=3):
    """Small random stays; every patient gets at least one lab and one diagnosis."""
    vocab = vocab or {"lab": 4, "symp": 4, "diag": 4, "pres": 3, "micro": 2}
    stays = []
    for i in range(n_patients):
        events = []
        for t, size in vocab.items():
            lo = 1 if t in ("lab", "diag") else 0
            k = int(rng.integers(lo, min(max_per_type, size) + 1))
            for j in sorted(rng.choice(size, size=k, replace=False).tolist()):
                if t == "lab":
                    events.append(ClinicalEvent(t, f"L{j}", "abnormal"))
                elif t == "micro":
                    events.append(ClinicalEvent(t, f"M{j}", "resistant"))
                elif t == "diag":
                    events.append(ClinicalEvent(t, f"{401 + j:03d}0"))
                else:
                    events.append(ClinicalEvent(t, f"{t}{j}"))
        stays.append(PatientStay(f"p{i}", events))
    return stays


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. the array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    """Max absolute difference scaled by the larger of the two gradients' max magnitude."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, title)`` then ``.detail(text)``; pass/fail follows the test."""

    class Recorder:
        def __call__(self, number, title):
            self.number, self.title, self.details = number, title, []
            return self

        def detail(self, text):
            self.details.append(text)

    rec = Recorder()
    yield rec
    rep = getattr(request.node, "rep_call", None)
    passed = rep is not None and rep.passed
    if hasattr(rec, "number"):
        _CRITERIA[rec.number] = (passed, rec.title, "; ".join(rec.details))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, title, details = _CRITERIA[number]
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" ({details})" if details else ""))
