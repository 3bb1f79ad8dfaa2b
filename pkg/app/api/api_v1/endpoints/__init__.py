# Presets and runs
