# Run registry storage
