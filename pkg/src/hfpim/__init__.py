"""Functional and cost simulator for a hybrid SLC/MLC resistive-crossbar PIM accelerator,
plus the SVD gradient-redistribution pipeline that picks which ranks to protect."""
from .errors import (CalibrationFailed, ConfigError, HfpimError, InvalidInput, InvalidRank,
                     PlacementFailed, TrainingDiverged)
from .svdcore import (SvdFactor, hard_threshold_rank, merge_sigma_vt, svd_decompose, truncate,
                      truncate_to_threshold, truncation_error)
from .quant import OffsetMatrix, QuantMatrix, QuantVector, offset_encode, quantize, quantize_vector
from .xbarsim import (AdcModel, CellMode, CrossbarTile, NoiseSpec, adc_bits, bit_error_rate,
                      bitserial_gemv, calibrate_sigma, nor_multiply, program_matrix, program_tile,
                      sfu_balance)
from .redistribution import (FinetuneConfig, GradientRecord, ProtectionPlan, finetune, grad_sigma,
                             make_task, noisy_loss, select_baseline_ranks, select_slc_ranks)
from .mapper import HardwareShape, ParallelismPlan, partition_by_plan, place_model, tile_matrix
from .costmodel import PRESETS, ComponentCostTable, CostReport, WorkloadSpec, count_ops, estimate

__version__ = "0.1.0"
