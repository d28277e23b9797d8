"""Regenerate the graph fixtures shipped for `unitscale verify`."""

from __future__ import annotations

from pathlib import Path

from unitscale import opslib as O
from unitscale.graph import Graph, ScaleFactors, resolve_constraints

OUT = Path(__file__).resolve().parents[1] / "src" / "unitscale" / "fixtures"


def ffn_unit(b=8, hidden=16, ffn=32, tau=0.5) -> Graph:
    """Residual FFN block, unit-scaled and constraint-resolved."""
    g = Graph()
    x = g.add_input((b, hidden), "data", "x")
    w1 = g.add_input((hidden, ffn), "param", "w1")
    w2 = g.add_input((ffn, hidden), "param", "w2")

    def branch(g, u):
        return O.scaled_matmul(g, O.scaled_gelu(g, O.scaled_matmul(g, u, w1, name="up"), "gelu"), w2, name="down")

    g.mark_output(O.residual_block(g, x, branch, O.ResidualScheme.fixed(tau), name="res"))
    g.freeze()
    return g.with_factors(resolve_constraints(g)).freeze(strict=True)


def counterexample_square(n=8, alpha=1.0, beta=2.0) -> Graph:
    """x + f*(x) with f(x) = x^2 and alpha != beta: not a scaled op."""
    g = Graph()
    x = g.add_input((n,), "data", "x")
    sq = g.apply_op("square", [x], ScaleFactors(alpha, (beta,)), "square")
    g.mark_output(g.apply_op("add", [x, sq], name="add"))
    return g.freeze()


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, g in (("ffn_unit", ffn_unit()), ("counterexample_square", counterexample_square())):
        path = OUT / f"{name}.json"
        path.write_text(g.to_json() + "\n")
        print(path)


if __name__ == "__main__":
    main()
