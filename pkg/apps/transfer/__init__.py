# The cross-transfer disentanglement model: encoders, decoder, losses, training and inference
