# Config, report and registry schemas
