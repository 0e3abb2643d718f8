from .attribution import AttributionMap, attribute_bag, integrated_gradients, minmax
from .cohort import CohortConfig, SynthCohort, cohort_csv, read_cohort, synth_cohort
from .model import (HE, ST, RiskConfig, RiskModel, RiskTrainResult, SlideBag, abmil_pool, cross_fuse,
                    init_risk_model, perceiver_compress, predict_risk, risk_forward, train_risk_model)
from .survival import (BootstrapResult, CoxFitError, CoxResult, KMCurve, LogRankResult, Stratification,
                       SurvivalRecord, bootstrap_ci, c_index, chi2_sf, cox_fit, cox_loglik, cox_nll_loss,
                       gammaincc, km_curve, logrank, stratify_median)

__all__ = [
    "AttributionMap", "attribute_bag", "integrated_gradients", "minmax",
    "CohortConfig", "SynthCohort", "cohort_csv", "read_cohort", "synth_cohort",
    "HE", "ST", "RiskConfig", "RiskModel", "RiskTrainResult", "SlideBag", "abmil_pool", "cross_fuse",
    "init_risk_model", "perceiver_compress", "predict_risk", "risk_forward", "train_risk_model",
    "BootstrapResult", "CoxFitError", "CoxResult", "KMCurve", "LogRankResult", "Stratification",
    "SurvivalRecord", "bootstrap_ci", "c_index", "chi2_sf", "cox_fit", "cox_loglik", "cox_nll_loss",
    "gammaincc", "km_curve", "logrank", "stratify_median",
]
