# Drive simulation and attack injection package
