# Dataset ingestion, drug-level splitting, and paired-sample construction
