# Metrics, DEG selection, baselines and report emission
