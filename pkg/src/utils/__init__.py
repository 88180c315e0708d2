# Utils package for vehicle anomaly detection
