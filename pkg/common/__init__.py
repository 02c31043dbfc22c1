# Shared data model, numerics, metrics and artifact plumbing
