#include "vqlab/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace vqlab {

void write_tensor_text(std::ostream& os, const Tensor& t) {
  os << "shape:";
  for (int d : t.shape()) os << " " << d;
  os << "\n";
  auto v = t.values();
  const int cols = t.dim(t.rank() - 1);
  for (std::size_t i = 0; i < v.size(); ++i) {
    os << format_real(v[i]);
    os << (((i + 1) % static_cast<std::size_t>(cols)) == 0 ? "\n" : " ");
  }
}

void save_tensor_text(const std::string& path, const Tensor& t) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_tensor_text(os, t);
}

Tensor parse_tensor_text(std::istream& is, const std::string& origin) {
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error(origin + ": empty tensor file");
  std::istringstream hs(header);
  std::string tag;
  hs >> tag;
  if (tag != "shape:") throw std::runtime_error(origin + ": expected 'shape:' header, got '" + tag + "'");
  std::vector<int> shape;
  int d;
  while (hs >> d) {
    if (d <= 0) throw std::runtime_error(origin + ": non-positive dimension " + std::to_string(d));
    shape.push_back(d);
  }
  if (shape.empty()) throw std::runtime_error(origin + ": empty shape");
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  std::vector<double> data;
  data.reserve(n);
  double v;
  while (is >> v) data.push_back(v);
  if (data.size() != n) {
    throw std::runtime_error(origin + ": expected " + std::to_string(n) + " values, got " +
                             std::to_string(data.size()));
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor load_tensor_text(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return parse_tensor_text(is, path);
}

std::string format_real(double v) {
  if (v == 0.0) return "0";  // canonicalize -0
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::map<std::string, std::string> parse_key_value(std::istream& is, const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    auto trim = [](std::string s) {
      auto a = s.find_first_not_of(" \t");
      auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
    }
    kv[key] = value;
  }
  return kv;
}

std::map<std::string, std::string> load_key_value(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return parse_key_value(is, path);
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << content;
}

}  // namespace vqlab
