# Observability ceiling and mixture-proportion estimation
