# Settings package for XTransferCDR
