#include <gtest/gtest.h>

#include <filesystem>

#include "ncis/dataset.hpp"
#include "ncis/harness.hpp"
#include "ncis/io.hpp"

using namespace ncis;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ncis_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Dataset, SameSpecSameBytes) {
  const DatasetSpec spec{7, 40, 10, 16, 1};
  const auto a = generate_dataset(spec), b = generate_dataset(spec);
  ASSERT_EQ(a.size(), 40u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].label, b[i].label);
  }
}

TEST(Dataset, SingleImage) {
  const auto d = generate_dataset({3, 1, 10, 32, 1});
  ASSERT_EQ(d.size(), 1u);
  EXPECT_GE(d[0].label, 0);
  EXPECT_LT(d[0].label, 10);
}

TEST(Dataset, PixelRangeLabelsAndBalance) {
  const auto d = generate_dataset({9, 100, 5, 16, 3});
  std::vector<int> per_class(5);
  for (const auto& s : d) {
    EXPECT_EQ(s.image.shape(), (Shape{3, 16, 16}));
    for (float v : s.image.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    ++per_class.at(s.label);
  }
  for (int c : per_class) EXPECT_EQ(c, 20);
}

TEST(Dataset, PrefixIsStableAcrossCounts) {
  const auto small = generate_dataset({7, 5, 10, 16, 1});
  const auto large = generate_dataset({7, 50, 10, 16, 1});
  for (std::size_t i = 0; i < small.size(); ++i) EXPECT_EQ(small[i].image, large[i].image);
}

TEST(Dataset, InvalidSpecs) {
  EXPECT_THROW(generate_dataset({7, 0, 10, 32, 1}), InvalidArgument);
  EXPECT_THROW(generate_dataset({7, 10, 1, 32, 1}), InvalidArgument);
  EXPECT_THROW(generate_dataset({7, 10, 11, 32, 1}), InvalidArgument);
}

TEST(ImageFormat, RoundTripWithinQuantization) {
  const auto d = generate_dataset({1, 2, 10, 16, 3});
  const auto dir = scratch_dir("images");
  for (const auto& s : d) {
    const auto path = dir / ("x" + image_extension(s.image));
    save_image(path, s.image);
    const Image back = load_image(path);
    ASSERT_EQ(back.shape(), s.image.shape());
    for (std::size_t i = 0; i < back.size(); ++i) EXPECT_LE(std::abs(back[i] - s.image[i]), 1.0f / 255.0f);
  }
}

TEST(ImageFormat, PayloadOfConstantImages) {
  const Bytes zeros = encode_image(Image({1, 2, 3}, 0.0f));
  const Bytes ones = encode_image(Image({3, 2, 2}, 1.0f));
  const std::string head0(zeros.begin(), zeros.begin() + 2), head1(ones.begin(), ones.begin() + 2);
  EXPECT_EQ(head0, "P5");
  EXPECT_EQ(head1, "P6");
  for (std::size_t i = zeros.size() - 6; i < zeros.size(); ++i) EXPECT_EQ(zeros[i], 0x00);
  for (std::size_t i = ones.size() - 12; i < ones.size(); ++i) EXPECT_EQ(ones[i], 0xFF);
}

TEST(ImageFormat, HeaderWithCommentAndErrors) {
  const std::string text = "P5\n# made by hand\n2 1\n255\n";
  Bytes b(text.begin(), text.end());
  b.push_back(0);
  b.push_back(255);
  const Image img = decode_image(b);
  EXPECT_EQ(img.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(img[1], 1.0f);
  b.pop_back();
  EXPECT_THROW(decode_image(b), FormatError);
  const std::string bad = "P3\n1 1\n255\n0";
  EXPECT_THROW(decode_image(Bytes(bad.begin(), bad.end())), FormatError);
}

TEST(TensorFormat, HeaderArithmetic) {
  Tensor<float> t({2, 3});
  EXPECT_EQ(encode_tensor(t).size(), 38u);
  EXPECT_EQ(encode_tensor(Tensor<double>({2, 3})).size(), 4u + 1 + 1 + 8 + 48);
}

TEST(TensorFormat, BitExactRoundTrip) {
  Rng rng(1);
  Tensor<float> f({3, 2, 5});
  for (auto& v : f.values()) v = static_cast<float>(rng.normal());
  Tensor<double> d({4});
  for (auto& v : d.values()) v = rng.normal();
  const auto dir = scratch_dir("tensors");
  save_tensor(dir / "f.nct", f);
  save_tensor(dir / "d.nct", d);
  EXPECT_EQ(load_tensor<float>(dir / "f.nct"), f);
  EXPECT_EQ(load_tensor<double>(dir / "d.nct"), d);
}

TEST(TensorFormat, RejectsBadInput) {
  Bytes b = encode_tensor(Tensor<float>({2}));
  Bytes bad_dtype = b;
  bad_dtype[4] = 3;
  EXPECT_THROW(decode_tensor(bad_dtype), FormatError);
  Bytes bad_magic = b;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_tensor(bad_magic), FormatError);
  Bytes truncated(b.begin(), b.end() - 1);
  EXPECT_THROW(decode_tensor(truncated), FormatError);
  Bytes trailing = b;
  trailing.push_back(0);
  EXPECT_THROW(decode_tensor(trailing), FormatError);
}

TEST(Checkpoint, EmptySetIsEightBytes) { EXPECT_EQ(encode_checkpoint(ParameterSet<float>{}).size(), 8u); }

TEST(Checkpoint, DuplicateNamesRejected) {
  ParameterSet<float> p;
  p.add("w", Tensor<float>({1}));
  EXPECT_THROW(p.add("w", Tensor<float>({1})), InvalidArgument);
}

TEST(Checkpoint, RoundTripKeepsForwardBitIdentical) {
  const auto model = Classifier<float>::init(1, 16, 10, 3);
  const auto dir = scratch_dir("ckpt");
  save_checkpoint(dir / "m.nck", model.params());
  const Classifier<float> back(load_checkpoint<float>(dir / "m.nck"));
  EXPECT_EQ(back, model);
  const auto x = generate_dataset({1, 1, 10, 16, 1})[0].image;
  EXPECT_EQ(back.predict(x), model.predict(x));
}

TEST(Checkpoint, BadMagicAndMissingFile) {
  Bytes b = encode_checkpoint(ParameterSet<float>{});
  b[3] = '2';
  EXPECT_THROW(decode_checkpoint<float>(b), FormatError);
  try {
    load_checkpoint<float>("/nonexistent/model.nck");
    FAIL();
  } catch (const MissingFile& e) {
    EXPECT_NE(std::string(e.what()).find("missing file"), std::string::npos);
  }
}

TEST(DatasetFiles, SaveLoadRoundTrip) {
  const auto d = generate_dataset({5, 12, 10, 8, 1});
  const auto dir = scratch_dir("dataset");
  save_dataset(dir, d);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back[i].image, d[i].image);
    EXPECT_EQ(back[i].label, d[i].label);
  }
}
