"""Regenerates the synthetic feeders in crates/core/data/feeders/."""

import json
import math
import pathlib

import numpy as np

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "data" / "feeders"
PHASES = ["a", "b", "c"]


def y_block(z, phases):
    y = np.linalg.inv(np.asarray(z, dtype=complex))
    k = len(phases)
    return {
        "re": [[round(float(y[i, j].real), 12) for j in range(k)] for i in range(k)],
        "im": [[round(float(y[i, j].imag), 12) for j in range(k)] for i in range(k)],
    }


def coupled_z(scale, phases):
    zs, zm = complex(0.02, 0.04) * scale, complex(0.008, 0.015) * scale
    k = len(phases)
    return [[zs if i == j else zm for j in range(k)] for i in range(k)]


def slack(phases):
    return {"id": "src", "phases": phases, "kind": "slack"}


def load_node(nid, loads):
    return {
        "id": nid,
        "phases": sorted(loads),
        "kind": "load",
        "loads": {p: {"p_kw": pq[0], "q_kvar": pq[1]} for p, pq in sorted(loads.items())},
    }


def feeder(nodes, lines, candidates="all", weights=None):
    doc = {"base_power_va": 1e6, "base_voltage_v": 7200.0, "nodes": nodes, "lines": lines, "candidates": candidates}
    if weights is not None:
        doc["weights"] = weights
    return doc


def line(a, b, phases, y, rating=None):
    out = {"from": a, "to": b, "phases": phases, "y_series_pu": y}
    if rating is not None:
        out["rating_a"] = rating
    return out


def write(name, doc):
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / name).write_text(json.dumps(doc, indent=2) + "\n")


def main():
    diag1 = {"re": [[2.0]], "im": [[-4.0]]}
    write("feasible_2bus_1ph.json", feeder(
        [slack(["a"]), load_node("n1", {"a": (500, 100)})],
        [line("src", "n1", ["a"], diag1)]))
    write("infeasible_2bus_1ph.json", feeder(
        [slack(["a"]), load_node("n1", {"a": (3000, 1500)})],
        [line("src", "n1", ["a"], diag1)]))

    diag3 = {
        "re": [[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 1.5]],
        "im": [[-4.0, 0.0, 0.0], [0.0, -5.0, 0.0], [0.0, 0.0, -3.5]],
    }
    write("infeasible_2bus_3ph_decoupled.json", feeder(
        [slack(PHASES), load_node("n1", {"a": (3000, 1500), "b": (400, 100), "c": (2500, 500)})],
        [line("src", "n1", PHASES, diag3)]))

    write("infeasible_3bus_1ph_chain.json", feeder(
        [slack(["a"]), load_node("m", {}) | {"phases": ["a"]}, load_node("f", {"a": (2200, 900)})],
        [line("src", "m", ["a"], {"re": [[4.0]], "im": [[-8.0]]}),
         line("m", "f", ["a"], {"re": [[4.0]], "im": [[-8.0]]})],
        candidates=[["f", "a"]]))

    write("feasible_3bus_3ph.json", feeder(
        [slack(PHASES),
         load_node("n1", {"a": (120, 40), "b": (90, 30), "c": (150, 60)}),
         load_node("n2", {"a": (80, 20), "b": (110, 50), "c": (60, 10)})],
        [line("src", "n1", PHASES, y_block(coupled_z(1.0, PHASES), PHASES), rating=400.0),
         line("n1", "n2", PHASES, y_block(coupled_z(1.5, PHASES), PHASES))]))

    write("infeasible_3bus_3ph.json", feeder(
        [slack(PHASES),
         load_node("n1", {"a": (300, 100), "b": (250, 80), "c": (300, 90)}),
         load_node("n2", {"a": (2600, 900), "b": (1200, 400), "c": (1800, 700)})],
        [line("src", "n1", PHASES, y_block(coupled_z(2.0, PHASES), PHASES)),
         line("n1", "n2", PHASES, y_block(coupled_z(3.0, PHASES), PHASES))]))

    # Eight-bus radial feeder: a trunk with a three-phase and a single-phase lateral.
    nodes = [slack(PHASES)]
    lines = []
    trunk = ["t1", "t2", "t3", "t4", "t5"]
    prev = "src"
    for k, nid in enumerate(trunk):
        nodes.append(load_node(nid, {p: (40 + 10 * ((k + i) % 3), 12 + 4 * i) for i, p in enumerate(PHASES)}))
        lines.append(line(prev, nid, PHASES, y_block(coupled_z(0.6, PHASES), PHASES)))
        prev = nid
    for nid, parent in [("l1", "t2")]:
        nodes.append(load_node(nid, {"a": (35, 10), "b": (25, 8), "c": (30, 9)}))
        lines.append(line(parent, nid, PHASES, y_block(coupled_z(0.8, PHASES), PHASES)))
    for nid, parent in [("s1", "t4")]:
        nodes.append(load_node(nid, {"b": (60, 20)}))
        lines.append(line(parent, nid, ["b"], y_block([[complex(0.03, 0.05)]], ["b"])))
    write("feasible_8bus_radial.json", feeder(nodes, lines))


if __name__ == "__main__":
    main()
