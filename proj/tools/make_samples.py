#!/usr/bin/env python3
"""Generate the bundled synthetic sample corpus and its replay script.

Writes:
  data/samples/<benchmark>.jsonl   10 text-only tasks per benchmark (+ image records)
  data/samples/script.jsonl        scripted-backend replies for every task
  tests/golden/sample_expected.json  expected S1 outcomes computed here,
                                     independently of the C++ engine

The corpus is synthetic; questions are placeholders, not benchmark items.
"""

import json
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
SEED = 20240917
N = 4

EMOTIONS = ["happy", "sadness", "fear", "disgust", "anger", "surprise"]
CODES = {"h": "happy", "s": "sadness", "f": "fear", "d": "disgust", "a": "anger", "sur": "surprise"}
DEFAULT_PATTERN = [["happy", "surprise"], ["sadness", "anger"], ["happy", "surprise"], ["sadness", "anger"]]


def cue_ids(group):
    ids = []
    for e in EMOTIONS:  # bank declaration order
        if e in group:
            ids += [f"{e}-{i}" for i in range(1, 6)]
    return ids


def baseline_ids(kind, t):
    k = 5 * len(DEFAULT_PATTERN[t - 1])
    if kind == "wait":
        return [f"wait#{i}" for i in range(1, k + 1)]
    if kind == "cot":
        return [f"cot#{i}" for i in range(1, k + 1)]
    return [f"sr-{(i - 1) % 10 + 1}#{i}" for i in range(1, k + 1)]


def make_tasks():
    """Task list per benchmark: (record as written, id, gold, correct form, wrong form)."""
    math = [
        ("What is 567 divided by 4?", "141.75", "numerical", "\\frac{567}{4}", "141.5"),
        ("Simplify the square root of 60 divided by 2.", "\\sqrt{15}", "expression", "sqrt(15)", "\\sqrt{14}"),
        ("How many positive divisors does 36 have?", "9", "numerical", "9", "8"),
        ("Compute 3/4 + 5/8.", "11/8", "numerical", "\\frac{11}{8}", "\\frac{9}{8}"),
        ("What is the sum of the first 10 positive integers?", "55", "numerical", "55", "45"),
        ("Find x if 2x + 3 = 10.", "7/2", "numerical", "3.5", "3"),
        ("What is 12 squared?", "144", "numerical", "144", "124"),
        ("Evaluate 2^10.", "1024", "numerical", "1024", "1000"),
        ("What is the remainder of 100 divided by 7?", "2", "numerical", "2", "3"),
        ("Give the product 0.25 times 8.", "2", "numerical", "2.0", "2.5"),
    ]
    physics = [
        ("A car travels 100 m in 8 s. Average speed in m/s?", "12.5", "numerical", "\\frac{25}{2}", "12"),
        ("Mass 2 kg, acceleration 3 m/s^2. Force in N?", "6", "numerical", "6", "5"),
        ("Kinetic energy of 2 kg at 3 m/s, in J?", "9", "numerical", "9", "18"),
        ("Period of a 4 Hz oscillation, in s?", "1/4", "numerical", "0.25", "0.4"),
        ("Voltage across 5 ohm carrying 2 A, in V?", "10", "numerical", "10", "2.5"),
        ("Power of 12 V at 0.5 A, in W?", "6", "numerical", "6", "24"),
        ("Wavelength of 340 m/s sound at 170 Hz, in m?", "2", "numerical", "2", "0.5"),
        ("Momentum of 3 kg at 4 m/s, in kg m/s?", "12", "numerical", "12", "7"),
        ("Work of 10 N over 3 m, in J?", "30", "numerical", "30", "13"),
        ("Pressure of 20 N on 4 m^2, in Pa?", "5", "numerical", "5", "80"),
    ]
    hle = [
        ("Which planet is closest to the Sun?", "Mercury", "exactMatch", "Mercury", "Venus"),
        ("Chemical symbol of sodium?", "Na", "exactMatch", "Na", "So"),
        ("Which option is prime? A) 4 B) 6 C) 7 D) 9", "C", "multipleChoice", "C", "D"),
        ("Author of the tragedy Hamlet?", "William Shakespeare", "exactMatch", "william shakespeare", "Marlowe"),
        ("Which option is even? A) 3 B) 5 C) 8 D) 9", "C", "multipleChoice", "(C)", "A"),
        ("Smallest perfect number?", "6", "exactMatch", "6", "28"),
        ("Largest ocean on Earth?", "Pacific Ocean", "exactMatch", "Pacific Ocean", "Atlantic Ocean"),
        ("Noble gas with atomic number 10?", "Neon", "exactMatch", "Neon", "Argon"),
        ("Which option is a mammal? A) shark B) whale C) trout D) eel", "B", "multipleChoice", "B", "A"),
        ("Base of the natural logarithm, symbol?", "e", "exactMatch", "e", "pi"),
    ]
    simpleqa = [
        ("In which year did the first crewed Moon landing happen?", "1969", "1969", "1968"),
        ("What is the capital of Australia?", "Canberra", "Canberra", "Sydney"),
        ("How many strings does a standard violin have?", "4", "4", "5"),
        ("Which element has the symbol Fe?", "Iron", "iron", "Lead"),
        ("What is the boiling point of water at sea level in Celsius?", "100", "100", "90"),
        ("Who painted the Mona Lisa?", "Leonardo da Vinci", "Leonardo da Vinci", "Michelangelo"),
        ("How many continents are there?", "7", "7", "6"),
        ("What is the largest planet in the Solar System?", "Jupiter", "Jupiter", "Saturn"),
        ("Which language has the most native speakers?", "Mandarin Chinese", "Mandarin Chinese", "English"),
        ("What is the freezing point of water in Fahrenheit?", "32", "32", "0"),
    ]

    out = {}
    recs, items = [], []
    for i, (q, gold, atype, good, bad) in enumerate(math, 1):
        tid = f"om-{i:02d}"
        recs.append({"id": tid, "question": q, "answer": gold, "answer_type": atype, "subject": "math"})
        items.append((tid, gold, good, bad))
        if i == 5:
            recs.append({"id": "om-img", "question": "Read the value from the figure.", "answer": "3",
                         "answer_type": "numerical", "subject": "math", "has_image": True})
    out["olympiad_math"] = (recs, items)

    recs, items = [], []
    for i, (q, gold, atype, good, bad) in enumerate(physics, 1):
        tid = f"op-{i:02d}"
        recs.append({"id": tid, "question": q, "answer": gold, "answer_type": atype, "subject": "physics"})
        items.append((tid, gold, good, bad))
        if i == 3:
            recs.append({"id": "op-img", "question": "Use the circuit in the image.", "answer": "1",
                         "answer_type": "numerical", "subject": "physics", "has_image": True})
    out["olympiad_physics"] = (recs, items)

    recs, items = [], []
    for i, (q, gold, atype, good, bad) in enumerate(hle, 1):
        tid = f"hle-{i:02d}"
        recs.append({"id": tid, "question": q, "answer": gold, "answer_type": atype, "category": "Other", "image": ""})
        items.append((tid, gold, good, bad))
        if i == 8:
            recs.append({"id": "hle-img", "question": "Identify the object.", "answer": "cat",
                         "answer_type": "exactMatch", "category": "Other", "image": "data:image/png;base64,AAAA"})
    out["hle"] = (recs, items)

    # SimpleQA preset: no id field (ids come from line numbers), question under "problem".
    recs, items = [], []
    for i, (q, gold, good, bad) in enumerate(simpleqa, 1):
        recs.append({"problem": q, "answer": gold, "topic": "general"})
        items.append((f"simpleqa-{i}", gold, good, bad))
    out["simpleqa"] = (recs, items)
    return out


def completion(answer, note):
    return f"{note}\nSo the final answer is \\boxed{{{answer}}}."


def main():
    rng = random.Random(SEED)
    benches = make_tasks()
    samples = ROOT / "data" / "samples"
    samples.mkdir(parents=True, exist_ok=True)

    script = []
    truth = {}  # (task, t, prompt_id) -> correct?; "*" covers the rest
    all_cues = [f"{e}-{i}" for e in EMOTIONS for i in range(1, 6)]
    all_baseline = [f"wait#{i}" for i in range(1, 11)] + [f"cot#{i}" for i in range(1, 11)] + \
                   [f"sr-{(i - 1) % 10 + 1}#{i}" for i in range(1, 11)]

    for bench, (recs, items) in benches.items():
        with open(samples / f"{bench}.jsonl", "w", encoding="utf-8") as f:
            for r in recs:
                f.write(json.dumps(r, ensure_ascii=False) + "\n")
        for tid, gold, good, bad in items:
            t0_ok = rng.random() < 0.2
            script.append({"task_id": tid, "iteration": 0, "prompt_id": "init",
                           "text": completion(good if t0_ok else bad, "Initial reasoning.")})
            truth[(tid, 0, "init")] = t0_ok
            for t in range(1, N + 1):
                script.append({"task_id": tid, "iteration": t, "prompt_id": "*",
                               "text": completion(bad, f"Revised reasoning at step {t}.")})
                for pid in all_cues:
                    if rng.random() < 0.03:
                        script.append({"task_id": tid, "iteration": t, "prompt_id": pid,
                                       "text": completion(good, f"Reconsidered after cue {pid}.")})
                        truth[(tid, t, pid)] = True
                for pid in all_baseline:
                    if rng.random() < 0.02:
                        script.append({"task_id": tid, "iteration": t, "prompt_id": pid,
                                       "text": completion(good, f"Reconsidered after {pid}.")})
                        truth[(tid, t, pid)] = True
                ens_ok = rng.random() < 0.35
                script.append({"task_id": tid, "iteration": t, "prompt_id": "ensembler",
                               "text": completion(good if ens_ok else bad, f"Synthesised answer at step {t}.")})
                truth[(tid, t, "ensembler")] = ens_ok

    with open(samples / "script.jsonl", "w", encoding="utf-8") as f:
        for e in script:
            f.write(json.dumps(e, ensure_ascii=False) + "\n")

    # Expected S1 outcomes: first correct iteration and request count per (strategy, task).
    def plan(strategy, t):
        if strategy == "heart":
            return cue_ids(DEFAULT_PATTERN[t - 1])
        return baseline_ids(strategy, t)

    expected = {}
    for strategy in ["heart", "wait", "cot", "self-reflection"]:
        key = "self_reflection" if strategy == "self-reflection" else strategy
        per_bench = {}
        for bench, (_, items) in benches.items():
            rows = {}
            for tid, *_ in items:
                first, requests = None, 1
                if truth[(tid, 0, "init")]:
                    first = 0
                else:
                    for t in range(1, N + 1):
                        ids = plan(key, t)
                        requests += len(ids)
                        if any(truth.get((tid, t, p), False) for p in ids):
                            first = t
                            break
                rows[tid] = {"first_correct_iteration": first, "request_count": requests}
            cumulative = [sum(1 for r in rows.values() if r["first_correct_iteration"] is not None
                              and r["first_correct_iteration"] <= t) / len(rows) for t in range(N + 1)]
            per_bench[bench] = {"tasks": rows, "cumulative_accuracy": cumulative}
        expected[strategy] = per_bench

    golden = ROOT / "tests" / "golden"
    golden.mkdir(parents=True, exist_ok=True)
    with open(golden / "sample_expected.json", "w", encoding="utf-8") as f:
        json.dump(expected, f, indent=1, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
