"""Configuration parsing, dataset bundles, exports, and the CLI surface.

Proves (oracles first):
  1. YAML config round-trip is a fixed point (parse -> dump -> parse gives an
     equal config and identical text), defaults fill absent sections, and
     every unknown or ill-typed key is rejected with its full dotted path.
  2. Builders convert field units to SI at the boundary: mPa*s -> Pa*s,
     1/bar -> 1/Pa, bar -> Pa, days -> seconds, m^3/day -> m^3/s; well
     indices are 1-based in config and bounds-checked.
  3. Bundles store little-endian float32 raw arrays with byte counts and
     SHA-256 checksums; reading verifies both and round-trips bitwise;
     tampering is detected.
  4. Forward-run export reproduces the solution arrays (as float32) and a
     per-well CSV in reporting units with full-precision values.
  5. Training-set export: labelled potentials match direct re-simulation
     bitwise, the time channels are normalized by the full scenario horizon,
     virtual fields carry no solutions, and varying-well mode emits one
     interior single-producer image per sample.
  6. Loss-parity export: recomputing the evaluator on the stored float32
     inputs reproduces the manifest's loss components exactly.
  7. CLI exit codes: 0 on success, 2 on configuration/user errors, 3 on
     numerical failure; metrics subcommand prints exact per-field rows.
"""
from __future__ import annotations

import csv
import json
from dataclasses import replace

import numpy as np
import pytest
import yaml

from resflow import (
    ConfigError,
    ConstantBHP,
    ConstantRate,
    UNITS,
    dumps_config,
    export_parity_cases,
    export_solution,
    export_training_set,
    load_config,
    loads_config,
    read_bundle,
    run,
    write_bundle,
)
from resflow import residual_loss as rl
from resflow.cli_io import main


CONFIG_TEXT = """\
grid: {nx: 8, ny: 8, nz: 3, lx_m: 80.0, ly_m: 80.0, lz_m: 6.0, z_top_m: 1000.0}
props:
  porosity: 0.2
  oil_density_kg_m3: 849.0
  viscosity_mpas: 3.0
  compressibility_per_bar: 1.0e-4
  formation_factor: 1.02
init: {p_ref_top_bar: 413.69}
time: {dt_days: 1.0, n_steps: 3}
wells:
  - name: P1
    i: 3
    j: 3
    k_top: 1
    k_bot: 3
    control: {type: bhp, value_bar: 350.0}
  - name: P2
    i: 6
    j: 6
    k_top: 1
    k_bot: 3
    control: {type: rate, value_m3_per_day: 5.0}
    radius_m: 0.12
covariance: {mean_lnk: 4.0, variance: 0.4, eta_x_m: 40.0, eta_y_m: 40.0, eta_z_m: 10.0}
kle: {n_modes: 4, seed: 11}
solver: {tol: 1.0e-8, max_iter: 500, preconditioner: jacobi}
loss: {data: 3.0, pde: 0.03, bc: 0.03, normalize: mean}
pso: {maxgen: 2, sizepop: 2, seed: 3}
inversion: {n_obs_steps: 2, truth_seed: 5}
dataset: {n_lnk_train: 2, n_lnk_virtual: 2, seed_train: 21, seed_virtual: 22}
"""


@pytest.fixture()
def cfg():
    return loads_config(CONFIG_TEXT)


@pytest.fixture()
def cfg_path(tmp_path):
    p = tmp_path / "case.yaml"
    p.write_text(CONFIG_TEXT)
    return p


def edited_doc(**overrides):
    """CONFIG_TEXT as a dict with top-level sections replaced/removed."""
    doc = yaml.safe_load(CONFIG_TEXT)
    for key, value in overrides.items():
        if value is None:
            doc.pop(key, None)
        else:
            doc[key] = value
    return doc


def expect_config_error(doc, path_fragment):
    with pytest.raises(ConfigError) as err:
        loads_config(yaml.safe_dump(doc))
    assert path_fragment in str(err.value)
    return err.value


# ── Config parsing ───────────────────────────────────────────────────────────

def test_round_trip_fixed_point(cfg):
    text = dumps_config(cfg)
    again = loads_config(text)
    assert again == cfg
    assert dumps_config(again) == text


def test_load_config_reads_file(cfg_path, cfg):
    assert load_config(cfg_path) == cfg


def test_defaults_fill_absent_sections():
    doc = edited_doc(solver=None, loss=None, pso=None, dataset=None,
                     covariance=None, kle=None, inversion=None)
    parsed = loads_config(yaml.safe_dump(doc))
    assert parsed.solver.tol == 1.0e-10
    assert parsed.solver.preconditioner == "amg"
    assert parsed.loss.data == parsed.loss.pde == parsed.loss.bc == 1.0
    assert parsed.loss.normalize == "mean"
    assert parsed.pso.maxgen == 50 and parsed.pso.sizepop == 20
    assert parsed.dataset.n_lnk_train == 5
    assert parsed.covariance is None and parsed.kle is None
    assert parsed.inversion is None


def test_unknown_keys_rejected_with_dotted_path():
    doc = edited_doc()
    doc["props"]["porosityy"] = 0.3
    err = expect_config_error(doc, "props.porosityy: unknown key")
    assert err.path == "props.porosityy"

    doc = edited_doc()
    doc["banana"] = 1
    expect_config_error(doc, "<root>.banana: unknown key")

    doc = edited_doc()
    doc["wells"][1]["skin"] = 0.0
    expect_config_error(doc, "wells[1].skin: unknown key")


def test_missing_required_keys():
    expect_config_error(edited_doc(init=None), "<root>.init")
    doc = edited_doc()
    del doc["grid"]["nx"]
    expect_config_error(doc, "grid.nx: missing required key")


def test_type_errors():
    doc = edited_doc()
    doc["grid"]["nx"] = "twelve"
    expect_config_error(doc, "grid.nx: expected an integer")
    doc = edited_doc()
    doc["props"]["porosity"] = True     # booleans are not numbers here
    expect_config_error(doc, "props.porosity: expected a number")
    doc = edited_doc()
    doc["wells"] = "P1"
    expect_config_error(doc, "wells: must be a list")
    doc = edited_doc()
    doc["wells"] = ["P1"]
    expect_config_error(doc, "wells[0]: must be a mapping")


def test_control_cross_validation():
    doc = edited_doc()
    doc["wells"][0]["control"] = {"type": "rate", "value_m3_per_day": 5.0,
                                  "value_bar": 350.0}
    expect_config_error(doc, "wells[0].control.value_bar: not valid")
    doc = edited_doc()
    doc["wells"][0]["control"] = {"type": "bhp", "value_bar": 350.0,
                                  "value_m3_per_day": 5.0}
    expect_config_error(doc, "wells[0].control.value_m3_per_day: not valid")
    doc = edited_doc()
    doc["wells"][0]["control"] = {"type": "thp"}
    expect_config_error(doc, "wells[0].control.type")


def test_not_yaml_rejected():
    with pytest.raises(ConfigError, match="not valid YAML"):
        loads_config("a: [")


# ── Builders and unit conversion ─────────────────────────────────────────────

def test_builders_convert_units(cfg):
    grid = cfg.build_grid()
    assert grid.shape == (8, 8, 3)
    assert grid.z_top == 1000.0
    assert grid.dz == pytest.approx(2.0)

    props = cfg.build_props()
    assert props.viscosity == pytest.approx(3.0e-3)          # mPa*s -> Pa*s
    assert props.compressibility == pytest.approx(1.0e-9)    # 1/bar -> 1/Pa

    scenario = cfg.build_scenario(np.full(grid.shape, 5.0e-14))
    assert scenario.p_ref_top == pytest.approx(413.69e5)     # bar -> Pa
    assert scenario.dt == pytest.approx(86400.0)             # day -> s
    bhp_well, rate_well = scenario.wells
    assert isinstance(bhp_well.control, ConstantBHP)
    assert bhp_well.control.bhp == pytest.approx(350.0e5)
    assert bhp_well.i == 2 and bhp_well.j == 2               # 1-based -> 0-based
    assert bhp_well.k_top == 0 and bhp_well.k_bot == 2
    assert isinstance(rate_well.control, ConstantRate)
    assert rate_well.control.q_sc == pytest.approx(5.0 / 86400.0)
    assert rate_well.r_w == pytest.approx(0.12)

    options = cfg.build_solver_options()
    assert options.tol == 1.0e-8 and options.preconditioner == "jacobi"
    weights = cfg.build_loss_weights()
    assert (weights.data, weights.pde, weights.bc) == (3.0, 0.03, 0.03)
    params = cfg.build_pso_params()
    assert params.maxgen == 2 and params.sizepop == 2 and params.seed == 3


def test_well_bounds_checked_one_based(cfg):
    bad = replace(cfg, wells=(replace(cfg.wells[0], i=0),))
    with pytest.raises(ConfigError, match=r"wells\[0\].i: must lie in \[1, 8\]"):
        bad.build_wells()
    bad = replace(cfg, wells=(replace(cfg.wells[0], k_bot=4),))
    with pytest.raises(ConfigError, match=r"k_bot: must lie in \[1, 3\]"):
        bad.build_wells()


def test_build_cov_requires_section(cfg):
    stripped = replace(cfg, covariance=None, kle=None)
    with pytest.raises(ConfigError, match="covariance"):
        stripped.build_cov()
    with pytest.raises(ConfigError, match="kle"):
        stripped.build_kle()


# ── Bundles ─────────────────────────────────────────────────────────────────

def test_bundle_round_trip_bitwise(tmp_path, cfg):
    rng = np.random.default_rng(3)
    arrays = {"a": rng.standard_normal((4, 3, 2)),
              "b": np.arange(6.0).reshape(2, 3)}
    out = write_bundle(tmp_path / "bundle", arrays, grid=cfg.build_grid(),
                       units={"a": "Pa"}, seeds={"demo": 1})
    bundle = read_bundle(out)
    for name, arr in arrays.items():
        stored = bundle.array(name)
        assert stored.dtype == np.dtype("<f4")
        assert np.array_equal(stored, arr.astype("<f4"))
    assert bundle.manifest["dtype"] == "<f4"
    assert bundle.manifest["storage_order"] == "k-fastest"
    assert bundle.manifest["grid"]["nx"] == 8
    assert bundle.manifest["seeds"] == {"demo": 1}

    # raw file on disk is exactly the little-endian float32 buffer
    raw = (out / "a.f32").read_bytes()
    assert raw == arrays["a"].astype("<f4").tobytes()
    entry = next(f for f in bundle.manifest["fields"] if f["name"] == "a")
    assert entry["bytes"] == 4 * arrays["a"].size
    assert entry["shape"] == [4, 3, 2]

    with pytest.raises(KeyError, match="available"):
        bundle.array("missing")


def test_bundle_tamper_detected(tmp_path):
    out = write_bundle(tmp_path / "b", {"x": np.ones(5)}, grid=None)
    raw = (out / "x.f32").read_bytes()

    (out / "x.f32").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="bytes"):
        read_bundle(out)

    flipped = bytes([raw[0] ^ 0xFF]) + raw[1:]
    (out / "x.f32").write_bytes(flipped)
    with pytest.raises(ValueError, match="checksum mismatch"):
        read_bundle(out)
    # verification can be skipped explicitly (byte count still enforced)
    bundle = read_bundle(out, verify=False)
    assert bundle.array("x").shape == (5,)

    manifest = json.loads((out / "manifest.json").read_text())
    manifest["format"] = "something-else"
    (out / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="not a resflow-bundle"):
        read_bundle(out)


# ── Exports ─────────────────────────────────────────────────────────────────

def forward_solution(cfg, lnk):
    scenario = cfg.build_scenario(UNITS.perm_to_si(np.exp(lnk)))
    return run(scenario, cfg.build_solver_options())


def test_export_solution_arrays_and_csv(tmp_path, cfg):
    lnk = cfg.sample_lnk_fields(seed=11, n=1)[0]
    solution = forward_solution(cfg, lnk)
    out = export_solution(tmp_path / "sim", solution, cfg, lnk=lnk,
                          seeds={"kle": 11})
    bundle = read_bundle(out)
    assert np.array_equal(bundle.array("potential"),
                          solution.potentials.astype("<f4"))
    assert np.array_equal(bundle.array("pressure"),
                          solution.pressures.astype("<f4"))
    assert np.array_equal(bundle.array("lnk"), lnk.astype("<f4"))
    assert np.allclose(bundle.array("time_days"), [0.0, 1.0, 2.0, 3.0])
    assert bundle.manifest["provenance"]["command"] == "simulate"

    with (out / "wells.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["well_id", "step", "time_days", "rate_m3_per_day",
                       "bhp_bar"]
    assert len(rows) == 1 + 2 * 3          # header + 2 wells x 3 steps
    # first data row: well P1, step 1 — full-precision reporting units
    ws = solution.well_solutions[0]
    assert rows[1][0] == "P1" and rows[1][1] == "1"
    assert float(rows[1][2]) == 1.0
    assert float(rows[1][3]) == float(UNITS.rate_from_si(ws.rates[0]))
    assert float(rows[1][4]) == float(UNITS.pressure_from_si(ws.bhp[0]))
    # BHP-controlled well reports its control exactly
    assert float(rows[1][4]) == pytest.approx(350.0, rel=1e-12)


def test_export_training_set_fixed_wells(tmp_path, cfg):
    out = export_training_set(cfg, tmp_path / "train", nt_train=2)
    bundle = read_bundle(out)
    lnk_train = bundle.array("lnk_train")
    potential = bundle.array("potential_train")
    assert lnk_train.shape == (2, 8, 8, 3)
    assert potential.shape == (2, 3, 8, 8, 3)      # nt_train + 1 snapshots
    # time channels normalized by the FULL scenario horizon (3 days)
    assert np.allclose(bundle.array("time_days"), [0.0, 1.0, 2.0])
    assert np.allclose(bundle.array("t_norm"), [0.0, 1.0 / 3.0, 2.0 / 3.0])
    # fixed wells: one shared binary image marking both wells' perforations
    image = bundle.array("well_image")
    assert image.shape == (8, 8, 3)
    assert image.sum() == 6.0
    assert set(np.unique(image)) <= {0.0, 1.0}
    # labelled fields regenerate from the recorded seed …
    expected_lnk = cfg.sample_lnk_fields(cfg.dataset.seed_train, 2)
    assert np.array_equal(lnk_train, expected_lnk.astype("<f4"))
    # … and labelled potentials match a direct re-simulation (from the
    # full-precision field the exporter used) bitwise
    solution = forward_solution(cfg, expected_lnk[0])
    assert np.array_equal(potential[0],
                          solution.potentials[:3].astype("<f4"))
    # virtual fields ship without solutions
    lnk_virtual = bundle.array("lnk_virtual")
    assert lnk_virtual.shape == (2, 8, 8, 3)
    assert "potential_virtual" not in bundle.arrays
    assert not np.array_equal(lnk_virtual, lnk_train)


def test_export_training_set_varying_wells(tmp_path, cfg):
    out = export_training_set(cfg, tmp_path / "vary", nt_train=1,
                              n_well_train=2, n_well_virtual=1)
    bundle = read_bundle(out)
    train_images = bundle.array("well_image_train")
    virtual_images = bundle.array("well_image_virtual")
    assert train_images.shape == (2, 8, 8, 3)
    assert virtual_images.shape == (2, 8, 8, 3)
    for image in list(train_images) + list(virtual_images):
        ii, jj, kk = np.nonzero(image)
        # single full-penetration producer at an interior position
        assert len(ii) == 3
        assert len(set(zip(ii, jj))) == 1
        assert 1 <= ii[0] <= 6 and 1 <= jj[0] <= 6
        assert sorted(kk) == [0, 1, 2]


def test_export_training_set_validation(tmp_path, cfg):
    with pytest.raises(ConfigError, match="nt_train"):
        export_training_set(cfg, tmp_path / "x", nt_train=9)
    with pytest.raises(ConfigError, match="n_lnk_train"):
        export_training_set(cfg, tmp_path / "x", n_lnk_train=0)


def test_export_parity_cases_reports_recompute(tmp_path, cfg):
    out = export_parity_cases(cfg, tmp_path / "parity", n_cases=3, seed=77)
    bundle = read_bundle(out)
    reports = bundle.manifest["reports"]
    assert len(reports) == 3
    grid = cfg.build_grid()
    props = cfg.build_props()
    weights = cfg.build_loss_weights()
    for rep in reports:
        c = rep["case"]
        lnk32 = bundle.array(f"lnk_{c}")
        phi_pred = bundle.array(f"phi_pred_{c}").astype(np.float64)
        phi_ref = bundle.array(f"phi_ref_{c}").astype(np.float64)
        assert np.array_equal(phi_pred[0], phi_ref[0])   # exact initial state
        scen = cfg.build_scenario(
            UNITS.perm_to_si(np.exp(lnk32.astype(np.float64))))
        report = rl.evaluate_sequences(
            grid, props, scen.perm, scen.wells, scen.dt, phi_pred,
            scen.p_ref_top, weights, data_pred=phi_pred, data_ref=phi_ref,
            normalize="mean")
        # float32 inputs + manifest floats round-trip via JSON: exact match
        assert report.loss_data == rep["loss_data"]
        assert report.loss_pde == rep["loss_pde"]
        assert report.loss_bc == rep["loss_bc"]
        assert report.loss_total == rep["loss_total"]
        assert report.residual_scale == rep["residual_scale"]
        assert rep["loss_data"] > 0.0 and rep["loss_pde"] > 0.0


# ── Command-line interface ───────────────────────────────────────────────────

def test_cli_genfield_and_simulate(tmp_path, cfg_path, capsys):
    gen = tmp_path / "fields"
    assert main(["genfield", "--config", str(cfg_path), "--out", str(gen),
                 "--n", "2"]) == 0
    assert read_bundle(gen).array("lnk").shape == (2, 8, 8, 3)

    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(sim),
                 "--perm", f"{gen}:lnk"]) == 0
    bundle = read_bundle(sim)
    assert bundle.array("pressure").shape == (4, 8, 8, 3)
    assert (sim / "wells.csv").exists()
    assert bundle.manifest["seeds"]["perm_source"] == f"{gen}:lnk"
    out = capsys.readouterr().out
    assert "mass-balance" in out


def test_cli_residual_check(tmp_path, cfg_path, capsys):
    assert main(["residual-check", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "OK" in out and "losses:" in out

    parity = tmp_path / "parity"
    assert main(["residual-check", "--config", str(cfg_path), "--parity", "2",
                 "--out", str(parity)]) == 0
    assert len(read_bundle(parity).manifest["reports"]) == 2

    with pytest.raises(SystemExit):
        main(["residual-check", "--config", str(cfg_path), "--parity", "2"])


def test_cli_export_dataset_and_uq(tmp_path, cfg_path):
    train = tmp_path / "train"
    assert main(["export-dataset", "--config", str(cfg_path), "--out",
                 str(train), "--nt-train", "1"]) == 0
    assert read_bundle(train).array("potential_train").shape == (2, 2, 8, 8, 3)

    uq_out = tmp_path / "uq"
    assert main(["uq", "--config", str(cfg_path), "--out", str(uq_out),
                 "--n", "3", "--workers", "2"]) == 0
    bundle = read_bundle(uq_out)
    assert bundle.array("mean_pressure").shape == (4, 8, 8, 3)
    assert np.all(bundle.array("var_pressure") >= 0.0)
    assert bundle.array("mean_rate").shape == (2, 3)
    with (uq_out / "well_stats.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 2 * 3


def test_cli_invert(tmp_path, cfg_path, capsys):
    inv = tmp_path / "inv"
    assert main(["invert", "--config", str(cfg_path), "--out", str(inv)]) == 0
    bundle = read_bundle(inv)
    assert bundle.array("lnk_inverted").shape == (8, 8, 3)
    trace = bundle.array("fitness_trace")
    assert trace.shape == (3,)                  # initial best + 2 generations
    assert np.all(np.diff(trace) <= 0)
    assert bundle.array("best_x").shape == (4,)
    with (inv / "fitness_trace.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["generation", "best_fitness"]
    assert len(rows) == 4
    assert "best fitness" in capsys.readouterr().out


def test_cli_metrics_exact_rows(tmp_path, cfg_path, capsys):
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg_path), "--out",
                 str(sim)]) == 0
    capsys.readouterr()
    csv_out = tmp_path / "metrics.csv"
    assert main(["metrics", "--pred", f"{sim}:pressure", "--ref",
                 f"{sim}:pressure", "--per-field", "--out",
                 str(csv_out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "id,relative_l2,r2,n_points"
    assert len(lines) == 1 + 4 + 1              # header + 4 snapshots + pooled
    for line in lines[1:5]:
        name, rel, r2, n = line.split(",")
        assert float(rel) == 0.0 and float(r2) == 1.0 and n == "192"
    assert lines[5] == "pooled,0.0,1.0,768"
    with csv_out.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id", "relative_l2", "r2", "n_points"]
    assert rows[-1] == ["pooled", "0.0", "1.0", "768"]


def test_cli_config_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(CONFIG_TEXT + "\nnonsense_section: {a: 1}\n")
    assert main(["simulate", "--config", str(bad), "--out",
                 str(tmp_path / "x")]) == 2
    assert "configuration error at <root>.nonsense_section" in \
        capsys.readouterr().err

    missing = tmp_path / "missing.yaml"
    assert main(["simulate", "--config", str(missing), "--out",
                 str(tmp_path / "x")]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_numerical_failure_exit_3(tmp_path, capsys):
    strict = tmp_path / "strict.yaml"
    strict.write_text(CONFIG_TEXT.replace(
        "solver: {tol: 1.0e-8, max_iter: 500, preconditioner: jacobi}",
        "solver: {tol: 1.0e-13, max_iter: 1, preconditioner: jacobi}"))
    assert main(["simulate", "--config", str(strict), "--out",
                 str(tmp_path / "x")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_cli_bad_bundle_field_spec(tmp_path, cfg_path, capsys):
    assert main(["metrics", "--pred", "no-colon", "--ref", "x:y"]) == 2
    assert "DIR:FIELD" in capsys.readouterr().err
