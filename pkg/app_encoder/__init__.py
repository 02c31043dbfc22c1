# TF-IDF step encoders
