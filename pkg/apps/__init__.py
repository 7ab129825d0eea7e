# Django apps package for XTransferCDR
