# XTransferCDR: cross-domain disentanglement of perturbation responses
__version__ = "1.0.0"
__author__ = "XTransferCDR Development Team"
