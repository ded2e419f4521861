import numpy as np
import pytest

from lcmaflow.flow import FlowModel, build_flow, flow_forward, perturb_parameters
from lcmaflow.plan import derive_plan_baseline, plan_from_maps


def random_model(rng, layout, scales, multiscale=True, hidden=8, couplings=2, final=2, scale=0.3):
    """A flow with random (non-identity) parameters; multi-scale variants get a random or LCMA plan."""
    plan = None
    if multiscale:
        if rng.random() < 0.5:
            plan = derive_plan_baseline("random", layout, scales, seed=int(rng.integers(1 << 31)))
        else:
            pre = build_flow(layout, scales, couplings_per_scale=1, final_couplings=0, hidden=4, rng=rng)
            perturb_parameters(pre, rng, 0.5)
            out = flow_forward(pre, rng.normal(size=(16,) + tuple(layout)))
            ids, _ = pre.trace_ids()
            plan = plan_from_maps([m.average().live[0] for m in out.boundary_maps], ids, layout)
    model = build_flow(layout, scales, plan=plan, couplings_per_scale=couplings, final_couplings=final,
                       hidden=hidden, rng=rng)
    perturb_parameters(model, rng, scale)
    return model


def flat_latent(model, x):
    out = flow_forward(model, x)
    n = out.logdet.shape[0]
    return np.concatenate([z.reshape(n, -1) for z in out.z_parts], axis=1)


def numerical_jacobian(fn, x, eps=1e-5):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    cols = []
    for i in range(x.size):
        up = x.copy()
        up[i] += eps
        dn = x.copy()
        dn[i] -= eps
        cols.append((fn(up) - fn(dn)) / (2 * eps))
    return np.stack(cols, axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_force_blocks(m, reverse=False):
    """Loop over every 2x2 block and sort its four entries by hand."""
    h, w, c = m.shape
    keep, factor = set(), set()
    for i in range(0, h, 2):
        for j in range(0, w, 2):
            for ch in range(c):
                cells = [(m[i + di, j + dj, ch], 2 * di + dj) for di in (0, 1) for dj in (0, 1)]
                if reverse:
                    cells.sort(key=lambda vc: (vc[0], vc[1]))
                else:
                    cells.sort(key=lambda vc: (-vc[0], vc[1]))
                pos = (i // 2) * (w // 2) + j // 2
                flat = [pos * 4 * c + 4 * ch + q for _, q in cells]
                keep.update(flat[:2])
                factor.update(flat[2:])
    return keep, factor


def check_partition(plan):
    for entry in plan.entries:
        d = entry.layout[0] * entry.layout[1] * entry.layout[2]
        k, f = set(entry.keep), set(entry.factor)
        assert not k & f and k | f == set(range(d)) and len(k) == len(f)


def check_block_coverage(plan):
    for entry in plan.entries:
        counts = np.bincount(np.asarray(entry.keep) // 4, minlength=len(entry.keep) // 2)
        assert np.all(counts == 2)


# --- suite-wide log-det bookkeeping check and acceptance report ------------------------------

LOGDET_AUDIT = {"passes": 0, "max_err": 0.0}
ACCEPTANCE = {}

_original_run = FlowModel.run


def _audited_run(self, x, track=True):
    result = _original_run(self, x, track)
    if track:
        _, logdet, live, frozen, _ = result
        total = live.sum(axis=1) + sum(f.sum(axis=1) for f in frozen)
        err = float(np.max(np.abs(total - logdet.data))) if total.size else 0.0
        LOGDET_AUDIT["passes"] += 1
        LOGDET_AUDIT["max_err"] = max(LOGDET_AUDIT["max_err"], err)
    return result


@pytest.fixture(autouse=True)
def logdet_bookkeeping_audit(monkeypatch):
    """Every tracked forward pass must have its map sum equal the total log-det."""
    monkeypatch.setattr(FlowModel, "run", _audited_run)
    before = LOGDET_AUDIT["max_err"]
    yield
    if LOGDET_AUDIT["max_err"] > max(before, 1e-10):
        pytest.fail(f"log-det map sum differs from total by {LOGDET_AUDIT['max_err']:.3e}")


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and not LOGDET_AUDIT["passes"]:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        tr.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    ok = LOGDET_AUDIT["max_err"] <= 1e-10
    tr.write_line(f"log-det audit over the whole run: {'PASS' if ok else 'FAIL'}  "
                  f"{LOGDET_AUDIT['passes']} forward passes, max |sum(map) - total| = {LOGDET_AUDIT['max_err']:.2e}")
