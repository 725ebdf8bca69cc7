#include <pybind11/pybind11.h>
PYBIND11_MODULE(_metastab, m) { m.doc() = "placeholder"; }
