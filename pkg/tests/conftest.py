"""Shared fixtures for the suite.

The acceptance tests share a single trained pipeline (cohort, autoencoder,
registration net, conditional model) built once per session through the CLI
so the command surface gets exercised end to end. Per-stage wall times are
recorded so each budget assertion charges the right test: training costs
belong to the end-to-end conditioning check, evaluation-only checks time
just their own measurements.

Each acceptance test registers a one-line verdict that is printed in the
terminal summary, pass or fail.
"""

import time
from types import SimpleNamespace

import pytest

_CRITERIA = []

PROBE_CONDITIONS = (0.1, 0.3, 0.5, 0.7, 0.9)


def _record(num, name, passed, detail):
    _CRITERIA.append((num, name, bool(passed), detail))


@pytest.fixture
def criterion():
    """Recorder for acceptance verdicts: criterion(num, name, passed, detail)."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, passed, detail in sorted(_CRITERIA):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {num} [{status}] {name}: {detail}")


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Default-settings training pipeline, run through the CLI."""
    from diffdef import cli

    root = tmp_path_factory.mktemp("pipeline")
    cohort_dir = root / "cohort"
    paths = {
        "cohort": str(cohort_dir),
        "ae": str(root / "ae.ckpt"),
        "regnet": str(root / "regnet.ckpt"),
        "model": str(root / "model.ckpt"),
    }
    seconds = {}

    def run(tag, argv):
        t0 = time.time()
        rc = cli.run_command(argv)
        seconds[tag] = time.time() - t0
        assert rc == 0, f"pipeline stage {tag} exited with {rc}"

    run("phantom", ["phantom-gen", "--n", "200", "--seed", "11",
                    "--out", paths["cohort"]])
    run("ae", ["train-ae", "--cohort", paths["cohort"], "--seed", "0",
               "--out", paths["ae"]])
    run("regnet", ["train-regnet", "--cohort", paths["cohort"], "--seed", "0",
                   "--out", paths["regnet"]])
    run("diffdef", ["train-diffdef", "--cohort", paths["cohort"],
                    "--ae", paths["ae"], "--regnet", paths["regnet"],
                    "--seed", "0", "--out", paths["model"]])
    return {"paths": paths, "seconds": seconds}


@pytest.fixture(scope="session")
def trained(pipeline):
    """Pipeline artifacts loaded back into memory."""
    from diffdef import fileio, phantoms

    cohort = fileio.load_cohort(pipeline["paths"]["cohort"])
    model = fileio.load_model(pipeline["paths"]["model"])
    regnet, _ = fileio.load_checkpoint(pipeline["paths"]["regnet"])
    ref = phantoms.reference_atlas(cohort.grid)
    return SimpleNamespace(cohort=cohort, model=model, regnet=regnet, ref=ref,
                           seconds=pipeline["seconds"])


@pytest.fixture(scope="session")
def atlases(trained):
    """Conditional atlases at the probe conditions, seed 1, with wall time."""
    from diffdef import atlas

    fields_by_c = {}
    t0 = time.time()
    for c in PROBE_CONDITIONS:
        phi, img = atlas.generate_atlas(trained.model, trained.ref.image, c, seed=1)
        fields_by_c[c] = (phi, img)
    return {"by_condition": fields_by_c, "seconds": time.time() - t0}


@pytest.fixture(scope="session")
def heldout_model(pipeline, tmp_path_factory):
    """Conditional model retrained on a cohort that excludes conditions near
    0.2, 0.4 and 0.8. The autoencoder and registration net are reused from
    the main pipeline: both are condition-agnostic (they never see the
    condition value), so retraining them on the gapped cohort would only
    duplicate work."""
    from diffdef import cli, fileio

    root = tmp_path_factory.mktemp("heldout")
    cohort_dir = str(root / "cohort")
    model_path = str(root / "model.ckpt")
    rc = cli.run_command(["phantom-gen", "--n", "200", "--mode", "heldout",
                          "--excluded", "0.2,0.4,0.8", "--seed", "11",
                          "--out", cohort_dir])
    assert rc == 0, "held-out cohort generation failed"
    rc = cli.run_command(["train-diffdef", "--cohort", cohort_dir,
                          "--ae", pipeline["paths"]["ae"],
                          "--regnet", pipeline["paths"]["regnet"],
                          "--seed", "0", "--out", model_path])
    assert rc == 0, "held-out conditional training failed"
    return fileio.load_model(model_path)
