"""ELBO, AIC and BIC as variable selectors for probit regression.

Each replicate splits a correlated synthetic pool into a training set and a
test set, walks the nested path of leading features and scores the model
each criterion picks. Smaller than the full study so it runs in seconds.
"""
from mfselect.experiments.designs import SyntheticDesign
from mfselect.experiments.runners import FitOptions, run_prediction

design = SyntheticDesign("probit", {"n": 2000, "p": 20, "r": 0.8, "q": 0.8, "signal": "decay"}, seed=0)
rows, _ = run_prediction(design, train_size=300, replicates=5, max_size=12,
                         options=FitOptions(prior_scale=1.0), seed=0)
print("criterion   error (sd)        median loss   mean size")
for r in rows:
    if r["kind"] == "summary":
        print(f"  {r['criterion']:5s}   {r['classification_error']:.3f} ({r['classification_error_sd']:.3f})"
              f"     {r['logistic_loss']:.3f}        {r['model_size']:.1f}")
