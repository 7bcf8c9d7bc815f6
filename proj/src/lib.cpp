#include "mumt/tensor.hpp"
