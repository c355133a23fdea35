from divegest.cli import entry

entry()
