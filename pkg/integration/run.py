"""
End-to-end fairness check on the synthetic benchmark.

For every seed: generate the biased dataset, train ERM and the three FairDi
stages, then check that ERM shows the planted gap, that each teacher is at
least as good on its own cohort as the step-0 model, and that the student
narrows the gap without giving up overall AUC.
"""

import argparse
import json
import logging
import sys
import time

from fairdi.cli import configure_logging
from fairdi.datagen import GenSpec, generate
from fairdi.metrics import auc
from fairdi.pipeline import evaluate, plans_from_settings, predict, run_fairdi, split, train_erm
from fairdi.settings import TRAIN_SETTINGS, layered
from fairdi.types import Stage

logger = logging.getLogger(__name__)

MIN_ERM_GAP = 0.05
TEACHER_MARGIN = 0.005
OVERALL_MARGIN = 0.01


def cohort_auc(backbone, head, dataset, group):
    preds = predict(backbone, head, dataset.cohort(group))
    return auc(preds.scores, preds.labels)


def run_seed(seed, bias, workers):
    dataset = generate(GenSpec(bias_strength=bias, seed=seed))
    settings = layered(TRAIN_SETTINGS, overrides={"seed": seed, "workers": workers})
    data = split(dataset, settings["ratios"], seed)
    plans = plans_from_settings(settings)

    erm = train_erm(data, plans[Stage.ERM])
    erm_report = evaluate(erm.backbone, erm.head, data.test)
    fairdi = run_fairdi(data, plans, workers=workers)
    student_report = evaluate(fairdi.backbone, fairdi.student, data.test)

    teachers = {}
    for group, head in fairdi.teachers.items():
        teachers[str(group)] = {
            "teacher": cohort_auc(fairdi.backbone, head, data.val, group),
            "step0": cohort_auc(fairdi.backbone, fairdi.stage0_head, data.val, group),
        }

    checks = {
        "erm_gap": erm_report.gap >= MIN_ERM_GAP,
        "teachers": all(t["teacher"] >= t["step0"] - TEACHER_MARGIN for t in teachers.values()),
        "student_gap": student_report.gap < erm_report.gap,
        "student_overall": student_report.overall >= erm_report.overall - OVERALL_MARGIN,
    }
    return {
        "seed": seed,
        "erm": {"overall": erm_report.overall, "gap": erm_report.gap},
        "student": {"overall": student_report.overall, "gap": student_report.gap},
        "teachers": teachers,
        "checks": checks,
        "passed": all(checks.values()),
    }


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    parser.add_argument("--bias", type=float, default=0.5)
    parser.add_argument("--workers", type=int, default=2)
    parser.add_argument("--min-passed", type=int, default=4)
    parser.add_argument("--out", help="write the per-seed results as JSON")
    args = parser.parse_args()

    configure_logging("INFO")
    started = time.perf_counter()
    results = []
    for seed in args.seeds:
        result = run_seed(seed, args.bias, args.workers)
        logger.info(
            "seed %d: ERM auc=%.4f gap=%.4f | student auc=%.4f gap=%.4f | %s",
            seed,
            result["erm"]["overall"],
            result["erm"]["gap"],
            result["student"]["overall"],
            result["student"]["gap"],
            "pass" if result["passed"] else f"FAIL {result['checks']}",
        )
        results.append(result)

    passed = sum(r["passed"] for r in results)
    logger.info(
        "%d of %d seeds passed in %.1fs", passed, len(results), time.perf_counter() - started
    )
    if args.out:
        with open(args.out, "w") as f:
            json.dump(results, f, indent=2)
    return 0 if passed >= min(args.min_passed, len(results)) else 1


if __name__ == "__main__":
    sys.exit(main())
