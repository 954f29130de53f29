# DOCO App Module
