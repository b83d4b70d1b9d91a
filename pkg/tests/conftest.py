import os

import pytest

from stokesdarcy.coefficients import compute_all

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="session")
def coeffs():
    return compute_all(0.5, 4, 0.05)


@pytest.fixture(scope="session")
def coeffs_m3():
    # zeta and xi keep 3e-6 and 2e-5 of their norm in the lowest cell of Z^3; relax the guard
    return compute_all(0.5, 3, 0.05, decay_tol=1e-4)


@pytest.fixture(scope="session")
def stripe_solutions():
    """All stripe problems at d = 0.5, m = 4, h = 0.05, keeping the fields."""
    from stokesdarcy import coefficients as co
    from stokesdarcy.mesh import build_stripe, build_unit_cell

    cell = build_unit_cell(0.5, 0.05)
    st = co._Stripe(build_stripe(4, 0.5, 0.05, cell=cell))
    cs, K = co.solve_cell_problems(cell)
    t, N1, Ns = co.solve_t(st)
    z, W = co.solve_zeta(st, t, N1)
    return {"stripe": st, "cell": cs, "K": K, "t": t, "N1": N1, "Ns": Ns, "zeta": z, "W": W}


@pytest.fixture(scope="session")
def cavity_run(coeffs, tmp_path_factory):
    """Default cavity comparison: macro solves, 16-member ensemble, report rows and checks."""
    from stokesdarcy.harness import RunConfig, stage_compare, stage_macro, stage_porescale

    cfg = RunConfig.load(out=str(tmp_path_factory.mktemp("cavity")))
    coeffs.write(os.path.join(cfg.out, "coefficients.txt"))
    stage_macro(cfg, coeffs)
    ens = stage_porescale(cfg)
    report = stage_compare(cfg)
    return {"cfg": cfg, "ensemble": ens, "report": report}


ACCEPTANCE = {}  # criterion number -> (passed, detail), filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")
