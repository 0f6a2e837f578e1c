#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "vqlab/tensor.hpp"

namespace vqlab {

// Tensor text format: first line "shape: d1 d2 ...", then whitespace-separated
// decimal values in row-major order.
void write_tensor_text(std::ostream& os, const Tensor& t);
void save_tensor_text(const std::string& path, const Tensor& t);
Tensor parse_tensor_text(std::istream& is, const std::string& origin);
Tensor load_tensor_text(const std::string& path);

// 17 significant digits: round-trip exact for 64-bit reals.
std::string format_real(double v);

// Flat key=value config text. '#' starts a comment, blank lines ignored.
std::map<std::string, std::string> parse_key_value(std::istream& is, const std::string& origin);
std::map<std::string, std::string> load_key_value(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace vqlab
