#include <doctest.h>

#include <filesystem>

#include "icl/tensor_file.hpp"

using namespace icl::io;

namespace {

TensorFile sample() {
  TensorFile f;
  f.tensors.push_back({"a.weight", {2, 3}, Dtype::F64, {1.5, -2.0, 3.25, 1e-300, -0.0, 7.0}});
  f.tensors.push_back({"scalar", {}, Dtype::F64, {42.0}});
  f.tensors.push_back({"half", {4}, Dtype::F32, {0.5, 0.25, -8.0, 3.0}});
  f.metadata = {{"tasks", {1, 2, 3}}, {"name", "t"}};
  return f;
}

}  // namespace

TEST_CASE("serialize round trip is exact and stable") {
  const auto f = sample();
  const auto bytes = serialize(f);
  const auto g = deserialize(bytes);
  REQUIRE(g.tensors.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(g.tensors[i].name == f.tensors[i].name);
    CHECK(g.tensors[i].dims == f.tensors[i].dims);
    CHECK(g.tensors[i].dtype == f.tensors[i].dtype);
    CHECK(g.tensors[i].values == f.tensors[i].values);
  }
  CHECK(g.metadata == f.metadata);
  CHECK(serialize(g) == bytes);
  CHECK(g.get("scalar").element_count() == 1);
  CHECK(g.contains("half"));
  CHECK_FALSE(g.contains("missing"));
  CHECK_THROWS(g.get("missing"));
}

TEST_CASE("file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "icl_tensor_file_test.iclt";
  write_tensor_file(path, sample());
  const auto g = read_tensor_file(path);
  CHECK(g.get("a.weight").values == sample().tensors[0].values);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_tensor_file(path), FormatError);
}

TEST_CASE("corrupt input is rejected") {
  auto bytes = serialize(sample());
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize(bad), FormatError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(deserialize(t), FormatError);
  }
}

TEST_CASE("element count mismatch is rejected on write") {
  TensorFile f;
  f.tensors.push_back({"x", {2, 2}, Dtype::F64, {1.0, 2.0, 3.0}});
  CHECK_THROWS_AS(serialize(f), FormatError);
}
