#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace vocadt {

// Error hierarchy. The CLI maps these onto exit codes:
// ConfigError -> 1, ValidationError/FormatError -> 2, NumericalError -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated artifact files.
class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

using TokenId = std::int32_t;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

// Hex SHA-256 digests.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

std::string base64_encode(std::string_view bytes);
// Throws FormatError on malformed input.
std::string base64_decode(std::string_view text);

std::string read_file(const std::filesystem::path& path);
// Writes via a temporary file and rename so readers never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view data);

bool is_valid_utf8(std::string_view text);

// git-describe style identifier captured at configure time.
std::string build_id();

}  // namespace vocadt
