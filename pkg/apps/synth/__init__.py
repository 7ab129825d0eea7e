# Synthetic datasets with known basal states and additive perturbation effects
