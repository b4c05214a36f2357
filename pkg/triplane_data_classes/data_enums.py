from enum import Enum


class ComparableEnum(Enum):
    """
    This class allows all inheriting Enum classes to be compared by name
    """

    def __eq__(self, other):
        return isinstance(other, Enum) and self.name == other.name

    def __hash__(self):
        return hash(self.name)


class PrimitiveType(ComparableEnum):
    """
    Geometric primitives a synthetic scene is built from
    """
    Sphere = 0
    Box = 1
    Plane = 2


class TextureFamily(ComparableEnum):
    """
    Procedural solid textures. Each family comes in two palettes, which gives the texture classes
    """
    Checker = 0
    Stripes = 1
    Dots = 2
    Solid = 3


class ShapeClass(ComparableEnum):
    """
    The K = 8 foreground arrangements. The value is the class label
    """
    Sphere = 0
    Box = 1
    SpherePairWide = 2
    SpherePairTall = 3
    BoxPairWide = 4
    SphereOnBox = 5
    SphereRow = 6
    BoxAndSphere = 7


class Perturbation(ComparableEnum):
    """
    Appearance shifts applied to held-out scenes in the robustness evaluation
    """
    Identity = "identity"
    TextureSwap = "texture-swap"
    Grayscale = "grayscale"
    ColorNoise = "color-noise"
    SizeShift = "size-shift"
    LowLight = "low-light"
    Blur = "blur"


class Variant(ComparableEnum):
    """
    Rows of the ablation grid
    """
    Teacher = "teacher"
    Full = "full"
    NoTriplane = "no_triplane"
    NoDist = "no_dist"
    FromScratch = "from_scratch"
    DataSixteenth = "data_1/16"
    DataQuarter = "data_1/4"
