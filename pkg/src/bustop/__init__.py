# __init__.py is required to exist to mark this as a package. It must not
# be merged into anything else. Keep it free of imports so that `bustop.main`
# stays cheap to load for `--help`.
