# Prefix warning monitor: symbolizer plus GRU / soft-FSM backends
