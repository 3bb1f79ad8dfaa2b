# Registry models
