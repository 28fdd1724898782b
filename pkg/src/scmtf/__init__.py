"""Structured coupled matrix-tensor factorization of EEG and fMRI data."""
from .cpd import CpdOptions, CpdResult, congruence_match, corcondia, cpd_fit
from .hrf import HrfParams, hrf_eval, hrf_waveform, sample_basis_init, toeplitz
from .inference import hrf_entropy, hrf_extremity, hrf_metrics, ioz_overlap_pvalue, pseudo_t, snpm, wavelet_resample
from .model import CostWeights, FactorSet, FitOptions, predict_fmri, scmtf_cost, scmtf_fit, scmtf_init
from .postproc import RankDiagnostics, cluster_components, select_ied, select_rank, standardize
from .synthgen import SynthSpec, generate
from .tensor_core import CpdFactors, cpd_reconstruct, fold, khatri_rao, unfold

__version__ = "0.1.0"
