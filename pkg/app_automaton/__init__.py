# RPNI extraction, calibration and audit of hard-symbol automata
