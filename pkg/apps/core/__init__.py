# Core utilities shared by all XTransferCDR apps
