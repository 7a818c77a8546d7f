# Settings, errors, logging and artifact storage
