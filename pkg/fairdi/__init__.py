"""Fair distillation training with fairness metrics and rank statistics"""

from fairdi.errors import FairDiError, ErrorCode
from fairdi.types import Dataset, Batch, Stage, Method, Task
from fairdi.nnkernel import DenseNet, Head, OptimizerState, Checkpoint
from fairdi.fairloss import FisConfig, fis_loss, fis_weights, wasserstein1d
from fairdi.distillation import DistillConfig, student_loss
from fairdi.pipeline import (
    TrainPlan,
    ExperimentRecord,
    split,
    train_erm,
    train_stage0,
    train_stage1,
    train_stage2,
    run_fairdi,
)
from fairdi.metrics import MetricsReport, report
from fairdi.stats import RankTable, friedman, nemenyi_cd, cd_diagram_data
from fairdi.datagen import GenSpec, generate
