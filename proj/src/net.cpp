#include "tag/net.hpp"

namespace tag {

Activation parse_activation(const std::string& name)
{
    if (name == "tanh") {
        return Activation::Tanh;
    }
    if (name == "identity") {
        return Activation::Identity;
    }
    throw std::invalid_argument("unknown activation: " + name);
}

std::string to_string(Activation act)
{
    return act == Activation::Tanh ? "tanh" : "identity";
}

} // namespace tag
