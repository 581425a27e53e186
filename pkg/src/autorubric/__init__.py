"""Rubric-as-reward toolkit: verified rubric generation, rubric-conditioned
pairwise judging, a Bradley-Terry baseline, and rubric policy optimization."""

from .preference import Candidate, Label, PreferenceDataset, PreferencePair, load_dataset, swap_pair, validate_pair
from .judge import Gateway, OracleBackend, OracleConfig, Order, RemoteBackend, ScriptedBackend, Verdict, parse_verdict
from .rubrics import PipelineConfig, RubricRecord, RubricStore, StructuredRubric, run_pipeline, structure_rubrics
from .evaluator import BiasReport, EvalProtocol, EvalReport, bias_ablation, cardinality_sweep, evaluate_dataset, judge_pair, select_rubric_subset
from .bt import BTRewardModel, BTTrainConfig, bt_grad, bt_loss, bt_probability, train_bt
from .rpo import GaussianChainPolicy, RPOConfig, rpo_objective, rpo_train
from .gradcheck import finite_diff_check

__version__ = "0.1.0"
