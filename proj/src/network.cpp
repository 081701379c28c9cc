#include "crcnn/network.hpp"

namespace crcnn {

const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::linear: return "linear";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

const char* to_string(ColorTag c) {
  switch (c) {
    case ColorTag::orange: return "orange";
    case ColorTag::blue: return "blue";
    case ColorTag::green: return "green";
    case ColorTag::yellow: return "yellow";
  }
  return "?";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "linear") return Activation::linear;
  if (s == "sigmoid") return Activation::sigmoid;
  throw DataError("unknown activation: " + s);
}

ColorTag color_from_string(const std::string& s) {
  if (s == "orange") return ColorTag::orange;
  if (s == "blue") return ColorTag::blue;
  if (s == "green") return ColorTag::green;
  if (s == "yellow") return ColorTag::yellow;
  throw DataError("unknown layer color: " + s);
}

}  // namespace crcnn
