# Numerical services
