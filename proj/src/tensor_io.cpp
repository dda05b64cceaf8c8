#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pwclo/tensor.hpp"

namespace pwclo::ad {

namespace {

constexpr const char* kMagic = "pwclo-params";
constexpr int kFormatVersion = 1;

void write_le_doubles(std::ostream& out, std::span<const double> values) {
  for (double v : values) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    out.write(bytes, 8);
  }
}

void read_le_doubles(std::istream& in, std::span<double> values) {
  for (double& v : values) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw std::runtime_error("checkpoint truncated in tensor data");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    v = std::bit_cast<double>(bits);
  }
}

std::string read_line(std::istream& in, const char* what) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(std::string("checkpoint truncated before ") + what);
  return line;
}

}  // namespace

void write_parameters(std::ostream& out, const ParameterStore& store) {
  out << kMagic << ' ' << kFormatVersion << '\n';
  out << "count " << store.size() << '\n';
  for (const auto& [name, p] : store) {
    if (name.empty() || name.find_first_of(" \t\r\n") != std::string::npos) {
      throw std::invalid_argument("parameter name not serializable: '" + name + "'");
    }
    out << "param " << name << ' ' << (p.trainable ? 1 : 0) << ' ' << p.value.rank();
    for (std::size_t d : p.value.shape()) out << ' ' << d;
    out << '\n';
    write_le_doubles(out, p.value.data());
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing parameter checkpoint");
}

ParameterStore read_parameters(std::istream& in) {
  std::istringstream header(read_line(in, "header"));
  std::string magic;
  int version = 0;
  header >> magic >> version;
  if (magic != kMagic) throw std::runtime_error("not a parameter checkpoint (bad magic)");
  if (version != kFormatVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  std::istringstream count_line(read_line(in, "parameter count"));
  std::string key;
  std::size_t count = 0;
  if (!(count_line >> key >> count) || key != "count") throw std::runtime_error("malformed checkpoint count line");

  ParameterStore store;
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ls(read_line(in, "parameter record"));
    std::string tag, name;
    int trainable = 0;
    std::size_t rank = 0;
    if (!(ls >> tag >> name >> trainable >> rank) || tag != "param") {
      throw std::runtime_error("malformed parameter record " + std::to_string(i));
    }
    if (rank > 8) throw std::runtime_error("implausible rank for parameter " + name);
    Shape shape(rank);
    for (auto& d : shape) {
      if (!(ls >> d)) throw std::runtime_error("malformed shape for parameter " + name);
    }
    Tensor value(shape);
    read_le_doubles(in, value.data());
    if (in.get() != '\n') throw std::runtime_error("missing record terminator after parameter " + name);
    store.add(name, std::move(value), trainable != 0);
  }
  return store;
}

void save_parameters(const std::string& path, const ParameterStore& store) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  write_parameters(out, store);
}

ParameterStore load_parameters(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  return read_parameters(in);
}

}  // namespace pwclo::ad
