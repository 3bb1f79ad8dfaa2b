# Settings, errors, file formats
