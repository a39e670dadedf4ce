//! Geometric primitives shared by every stage: cameras, images, meshes and
//! the cubic volume description. World units are centimetres throughout.

mod camera;
mod image;
mod mesh;
mod volume;

pub use camera::{CameraJson, CameraView, Projection};
pub use image::ImageBuffer;
pub use mesh::{TriangleMesh, MIN_TRIANGLE_AREA};
pub use volume::{GridIndex, VolumeSpec};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Vec2 = nalgebra::Vector2<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Free-function form of [`CameraView::project`].
pub fn project(camera: &CameraView, point: &Vec3) -> Projection {
    camera.project(point)
}

/// Free-function form of [`ImageBuffer::bilinear_sample`].
pub fn bilinear_sample(image: &ImageBuffer, pixel: &Vec2) -> crate::Result<Vec<f64>> {
    image.bilinear_sample(pixel)
}

/// Free-function form of [`TriangleMesh::vertex_normals`].
pub fn mesh_vertex_normals(mesh: &TriangleMesh) -> Vec<Vec3> {
    mesh.vertex_normals()
}
