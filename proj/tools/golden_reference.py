#!/usr/bin/env python3
"""Reference metrics for transcript files, computed without the C++ library.

Usage: golden_reference.py RUN.jsonl BASE.jsonl RLFR.jsonl > metrics.json

Matching, span verification, grading and the metric formulas are restated
here pairwise over explicit token sets.
"""

import json
import sys

NS = "NotSupported"


def tokens(span):
    return set(range(span[0], span[1]))


def significant(a, b):
    n = len(tokens(a) & tokens(b))
    return 2 * n > len(tokens(a)) or 2 * n > len(tokens(b))


def verify(completion, span):
    claim = ns = 0
    for c in completion["claims"]:
        n = len(tokens(c["span"]) & tokens(span))
        claim += n
        if c["truth"] == NS:
            ns += n
    return claim > 0 and 2 * ns >= claim


def match(p, g, completion):
    g_flags = []
    for x in g:
        hits = [y for y in p if significant(x, y)]
        if any(tokens(x) <= tokens(y) for y in hits):
            g_flags.append(True)
        else:
            g_flags.append(any(2 * len(tokens(x) & tokens(y)) >= len(tokens(x)) for y in hits))
    p_flags = []
    for x in p:
        hits = [y for y in g if significant(x, y)]
        if not hits:
            p_flags.append(verify(completion, x))
        elif any(tokens(y) <= tokens(x) for y in hits):
            p_flags.append(True)
        else:
            p_flags.append(any(2 * len(tokens(x) & tokens(y)) >= len(tokens(x)) for y in hits))
    return p_flags, g_flags


OUTCOME_LABEL = {
    "None": "IncorrectMaintain",
    "Fixed": "Fixed",
    "NewIncorrect": "NewIncorrect",
    "FailedFix": "FailedFix",
    "Acknowledged": "Retracted",
    "DoubledDown": "IncorrectMaintain",
    "CleanRetract": "CorrectRetract",
    "WrongAspect": "IncorrectRetract",
    "NoRetract": "NotRetract",
}


def grade(iv, p_correct):
    if not p_correct:
        return "Stable" if iv["action"] == "Maintain" else "Unstable"
    label = OUTCOME_LABEL[iv["outcome"]]
    if label == "Retracted":
        label = "CorrectRetract" if iv["substantive"] else "IncorrectRetract"
    return label


def counts(path):
    c = dict(sequences=0, detections=0, true_positives=0, ground_truth=0, caught=0, fixed=0,
             correct_retract=0, stable=0)
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            t = json.loads(line)
            comp = t["completion"]
            p = [d["span"] for d in t["flagged"]]
            g = [cl["span"] for cl in comp["claims"] if cl["truth"] == NS]
            pf, gf = match(p, g, comp)
            c["sequences"] += 1
            c["detections"] += len(p)
            c["true_positives"] += sum(pf)
            c["ground_truth"] += len(g)
            c["caught"] += sum(gf)
            for rec in t["interventions"]:
                label = grade(rec["intervention"], pf[rec["flagged_index"]])
                c["fixed"] += label == "Fixed"
                c["correct_retract"] += label == "CorrectRetract"
                c["stable"] += label == "Stable"
    return c


def ratio(a, b):
    return a / b if b else None


def report(c):
    n = c["sequences"]
    fp = c["detections"] - c["true_positives"]
    return {
        "counts": c,
        "n_seq": n,
        "precision": ratio(c["true_positives"], c["detections"]),
        "recall": ratio(c["caught"], c["ground_truth"]),
        "caught_per_seq": c["caught"] / n,
        "hallucinations_per_seq": c["ground_truth"] / n,
        "false_positives_per_seq": fp / n,
        "fixed_rate": ratio(c["fixed"], c["true_positives"]),
        "correct_retract_rate": ratio(c["correct_retract"], c["true_positives"]),
        "stable_rate": ratio(c["stable"], fp),
    }


def derived(base, rlfr, run):
    gb, gr, gi = (r["hallucinations_per_seq"] for r in (base, rlfr, run))
    if run["caught_per_seq"] == 0:
        removed = 0.0
    elif run["fixed_rate"] is None or run["correct_retract_rate"] is None:
        removed = None
    else:
        removed = run["caught_per_seq"] * (run["fixed_rate"] + run["correct_retract_rate"])
    if run["false_positives_per_seq"] == 0:
        introduced = 0.0
    elif run["stable_rate"] is None:
        introduced = None
    else:
        introduced = run["false_positives_per_seq"] * (1.0 - run["stable_rate"])
    out = dict(overall_reduction=None, policy_reduction=None, in_context_reduction=None, direct_reduction=None)
    if not gb > 0:
        return out
    known = removed is not None and introduced is not None
    pr = 1.0 - gr / gb
    out["policy_reduction"] = pr
    if known:
        out["overall_reduction"] = 1.0 - (gi + introduced - removed) / gb
    if gr > 0:
        out["in_context_reduction"] = 1.0 - (gi / gr) * (1.0 - pr)
        if known:
            out["direct_reduction"] = (removed - introduced) / gr * (1.0 - pr)
    return out


def main(argv):
    run, base, rlfr = (report(counts(p)) for p in argv[1:4])
    doc = {"reports": {"run": run, "base": base, "rlfr": rlfr}, "derived": derived(base, rlfr, run)}
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main(sys.argv)
