# Semiclassical Coupling Lab
