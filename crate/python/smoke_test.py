"""Smoke test for the `dtvg` extension module.

Build and install with `maturin develop -m crates/python/Cargo.toml`, or
point DTVG_LIB at a directory containing `dtvg.so` (a renamed copy of the
cdylib from `cargo build -p dtvg-python --release`).
"""

import math
import os
import sys
import tempfile

if os.environ.get("DTVG_LIB"):
    sys.path.insert(0, os.environ["DTVG_LIB"])

import dtvg


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    p_init = dtvg.SoftPrompt([[0.5, -0.25, 1.0], [0.0, 2.0, -1.0]])
    p_star = dtvg.SoftPrompt([[1.5, -0.25, 0.0], [1.0, 2.5, -1.0]])
    t = dtvg.compute_tpv(p_star, p_init, "qa")
    check(t.delta() == [[1.0, 0.0, -1.0], [1.0, 0.5, 0.0]], "tpv is the difference")
    check(t.apply(p_init).weights() == p_star.weights(), "tpv reconstructs the tuned prompt")

    # pooled sums are (0, 1.5) and (2, 2); sim = 3 / 9
    u = dtvg.TaskPromptVector("nli", [[1.0, 1.0, 0.0], [2.0, 0.0, 0.0]], p_init.fingerprint)
    check(math.isclose(dtvg.sim(t, u), 3.0 / 9.0), "sim of pooled sums")
    check(math.isclose(dtvg.sim(dtvg.rescale(t, [2.0, 2.0, 2.0]), u), 6.0 / 9.0), "rescale is per token")

    table = dtvg.SimTable([0.5, -0.1, 0.3], [[1.0, 0.2, 0.4], [0.2, 1.0, 0.0], [0.4, 0.0, 1.0]], ["a", "b", "c"])
    g = dtvg.greedy_group(table)
    check(g["selected_ids"] == ["a", "c"], "greedy admits helpful consistent sources")
    check(math.isclose(g["kc"], 0.4), "knowledge consistency of the group")
    e = dtvg.exact_group(table)
    check(e["objective"] >= g["objective"] - 1e-12, "exact objective dominates greedy")

    m = dtvg.merge(p_init, t, [(u, [0.0, 0.0, 0.0])])
    check(m.weights() == p_star.weights(), "merge with a zero source scale")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "qa.tpvf")
        dtvg.write_tpvf(path, t)
        back = dtvg.read_tpvf(path)
        check(back.task_id == "qa" and back.delta() == t.delta(), "tpvf round trip")

    cfg = "[stage1]\nsteps = 40\n[transfer]\nsteps = 20\n"
    r = dtvg.run_experiment(seed=3, mode="no_transfer_pt", config_toml=cfg)
    check(0.0 <= r["test_accuracy"] <= 1.0, f"run_experiment test accuracy {r['test_accuracy']:.3f}")
    again = dtvg.run_experiment(seed=3, mode="no_transfer_pt", config_toml=cfg)
    check(again["losses"] == r["losses"], "runs are deterministic")

    per_mode, text = dtvg.compare_modes([0, 1], ["dtvg_dynamic", "no_transfer_pt"], cfg)
    check(set(per_mode) == {"dtvg_dynamic", "no_transfer_pt"}, "compare covers the requested modes")
    print(text)

    try:
        dtvg.compute_tpv(p_star, dtvg.SoftPrompt([[0.0]]), "x")
    except ValueError as err:
        check("shape" in str(err).lower() or "dimension" in str(err).lower(), f"shape mismatch raises ({err})")
    else:
        raise SystemExit("FAIL shape mismatch did not raise")
    print("smoke test passed")


if __name__ == "__main__":
    main()
