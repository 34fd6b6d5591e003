from pathlib import Path

FIXTURES = Path(__file__).parent

# Overall AUC of five methods on eleven dataset/attribute tasks
OVERALL_AUC = FIXTURES / "overall_auc.csv"
# Per-task overall, minimum group AUC, gap and the derived fairness columns
GROUP_AUC = FIXTURES / "group_auc.csv"
RANKS_K3_N4 = FIXTURES / "ranks_k3_n4.csv"
ALL_EQUAL = FIXTURES / "all_equal.csv"
DATASET_3 = FIXTURES / "dataset_3.csv"
PREDICTIONS = FIXTURES / "predictions.csv"
SEGMENTATION_INDEX = FIXTURES / "segmentation" / "index.csv"
