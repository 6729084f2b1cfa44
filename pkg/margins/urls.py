from django.urls import path
from . import views

app_name = 'margins'

urlpatterns = [
    path('runs/', views.run_list, name='run_list'),
    path('runs/<int:pk>/', views.run_detail, name='run_detail'),
]
