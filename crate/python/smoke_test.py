"""Smoke test for the anchorlens Python extension.

Build and install first, for example:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist && pip install dist/anchorlens-*.whl
"""

import json
import math
import pathlib
import sys
import tempfile

import anchorlens

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "crates" / "core" / "tests" / "fixtures"


def check(cond, label):
    print(("ok   " if cond else "FAIL ") + label)
    return bool(cond)


def main():
    results = []
    lex = anchorlens.lexical_anchoring("the red fox ran", "red fox")
    results.append(check(lex["a_lex"] == 1.0 and lex["lcs_len"] == 2, "lexical anchoring"))
    results.append(check(anchorlens.lcs_length(list("abcbdab"), list("bdcaba")) == 4, "lcs length"))

    b = anchorlens.entropic_breakdown([0.0, 1.0, 1.0], 0.1)
    results.append(check(abs(b["a_ent"] - 0.393919) < 1e-6, "entropic breakdown"))
    results.append(check(abs(anchorlens.capacity_bound(5, 8, 0.0) - 5 * math.log(8)) < 1e-12, "capacity bound"))

    text = anchorlens.render_skeleton([("PLAN", "Define the goal."), ("INFR", "Derive the result.")])
    results.append(check(anchorlens.parse_skeleton(text)[1] == (2, "INFR", "Derive the result."), "skeleton round trip"))
    lint = anchorlens.lint_skeleton("1. [PLAN] " + " ".join(["word"] * 21))
    results.append(check([v["rule_id"] for v in lint] == ["L1"], "skeleton lint"))
    try:
        anchorlens.parse_skeleton("1. [FOO] x")
        results.append(check(False, "invalid tag raises"))
    except ValueError:
        results.append(check(True, "invalid tag raises"))

    results.append(check(anchorlens.build_condition("COPY", answer="A b") == "A b", "copy condition"))
    results.append(check(anchorlens.mask_content_words("The cat sat") == "The ____ ____", "cloze masking"))

    with tempfile.TemporaryDirectory() as tmp:
        summary = anchorlens.score(
            str(FIXTURES / "pairs.jsonl"),
            tmp,
            methods=["NEU", "SSR"],
            metrics=["lex", "ent", "prob"],
            pairs=True,
            toy_model=str(FIXTURES / "toy_model.json"),
        )
        results.append(check(summary["total"] == 12 and summary["failed"] == 0, "toy pipeline"))
        rows = [json.loads(l) for l in open(summary["output"])]
        results.append(check(all(r["scores"]["a_prob"] is not None for r in rows), "scored records"))
        md = anchorlens.report_markdown(summary["output"], "NEU")
        results.append(check("| SSR |" in md, "report markdown"))

    print(f"{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
